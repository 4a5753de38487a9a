pub mod commands;
pub mod render;
pub mod server;
pub mod wire;
