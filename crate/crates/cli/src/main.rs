fn main() {
    println!("uglad");
}
