pub mod cache;
pub mod detect;
pub mod engine;
pub mod explore;
pub mod expr;
pub mod interval;
pub mod ir;
pub mod oracle;
pub mod par;
pub mod report;
pub mod solver;
