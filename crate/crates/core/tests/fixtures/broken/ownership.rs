// Expected diagnostic: E0382 (use of moved value).
pub fn echo() -> String {
    let original = String::from("moved");
    let taken = original;
    drop(taken);
    original
}
