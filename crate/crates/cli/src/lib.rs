//! Library side of the `hapw` binary: pieces shared with the test suites.

pub mod gradcheck;
