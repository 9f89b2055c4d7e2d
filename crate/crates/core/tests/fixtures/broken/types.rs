// Expected diagnostic: E0308 (mismatched types).
pub fn answer() -> i32 {
    "forty two"
}
