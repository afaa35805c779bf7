pub mod oracles;
pub mod suites;
