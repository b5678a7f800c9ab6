pub mod conv;
pub mod elementwise;
pub mod layout;
pub mod norm;
pub mod pool;
