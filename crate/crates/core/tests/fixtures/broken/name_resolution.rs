// Expected diagnostic: E0425 (unresolved name).
pub fn lookup() -> i32 {
    undefined_name
}
