// Expected diagnostic: E0277 (trait bound not satisfied).
fn duplicate<T: Clone>(value: T) -> T {
    value.clone()
}

pub struct Opaque;

pub fn run() -> Opaque {
    duplicate(Opaque)
}
