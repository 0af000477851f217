pub mod container;
pub mod data;
pub mod flows;
pub mod numkit;
pub mod stats;
pub mod synthdata;
pub mod scm;
pub mod harmonize;
pub mod combat;
pub mod eval;
