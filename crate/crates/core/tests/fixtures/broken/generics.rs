// Expected diagnostic: E0107 (wrong number of generic arguments).
pub struct Pair<T>(pub T, pub T);

pub fn make() -> Pair<i32, i32> {
    Pair(1, 2)
}
