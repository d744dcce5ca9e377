//! Coordinated release control for networks of reservoirs.

pub mod agents;
pub mod autodiff;
pub mod bench;
pub mod config;
pub mod env;
pub mod error;
pub mod guidance;
pub mod metrics;
pub mod murmuration;
pub mod network;
pub mod nn;
pub mod rng;
pub mod scenario;
pub mod uncertainty;

pub use error::{Error, Result};

macro_rules! book_chapters {
    ($($name:ident => $file:literal),* $(,)?) => {
        $(
            #[cfg(doctest)]
            #[doc = include_str!(concat!("../../../book/src/", $file))]
            mod $name {}
        )*
    };
}

book_chapters! {
    book_network => "network.md",
    book_uncertainty => "uncertainty.md",
    book_coordination => "coordination.md",
    book_agents => "agents.md",
    book_guidance => "guidance.md",
    book_metrics => "metrics.md",
    book_reproducibility => "reproducibility.md",
}
