// Expected diagnostic: E0106 (missing lifetime specifier).
pub struct Holder {
    pub value: &i32,
}
