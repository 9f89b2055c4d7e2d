// Expected diagnostic: E0658 (unstable feature used on the stable channel).
#[marker]
pub trait Tag {}
