fn main() { println!("{}", htmle::placeholder()); }
