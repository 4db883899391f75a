fn main() {
    println!("tamoe CLI placeholder");
}
