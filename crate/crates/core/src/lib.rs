//! Static detection of TEE-backed Android API usage and cryptographic
//! libraries in APK files, with third-party library attribution and
//! corpus-level aggregation.

pub mod aggregate;
pub mod archive;
pub mod attribution;
pub mod corpus;
pub mod deadline;
pub mod dex;
pub mod exec;
pub mod fetch;
pub mod manifest;
pub mod matching;
pub mod patterns;
pub mod pipeline;
pub mod report;
pub mod testkit;
