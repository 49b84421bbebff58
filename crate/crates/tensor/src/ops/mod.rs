pub mod conv;
pub mod elementwise;
pub mod loss;
pub mod norm;
pub mod pool;
