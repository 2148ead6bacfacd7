fn main() {
    println!("semcom CLI placeholder");
}
