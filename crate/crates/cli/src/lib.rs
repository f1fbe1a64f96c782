pub mod catalog;
pub mod commands;
pub mod report;
pub mod sysfile;
