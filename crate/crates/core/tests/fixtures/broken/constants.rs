// Expected diagnostic: E0015 (call to non-const function in a const context).
fn seed() -> i32 {
    3
}

pub const START: i32 = seed();
