// Expected diagnostic: E0432 (unresolved import).
pub use crate::missing_module::MissingThing;
