pub mod backbone;
pub mod data;
pub mod eval;
pub mod objectives;
pub mod pipeline;
pub mod tensor;
