pub mod layers;
pub mod model;
pub mod optim;
pub mod serialize;
pub mod train;
