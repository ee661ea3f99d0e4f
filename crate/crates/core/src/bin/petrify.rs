fn main() {
    println!("petrify");
}
