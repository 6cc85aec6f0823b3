pub mod camera;
pub mod diffusion;
pub mod error;
pub mod fitting;
pub mod refine;
mod linalg;
pub mod rng;
pub mod scene;
pub mod triplane;
pub mod volrend;
pub mod workbench;

pub use error::{Error, Result};
pub use glam;

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/captions.md")]
    mod captions {}
    #[doc = include_str!("../../../book/src/rendering.md")]
    mod rendering {}
    #[doc = include_str!("../../../book/src/fitting.md")]
    mod fitting {}
    #[doc = include_str!("../../../book/src/diffusion.md")]
    mod diffusion {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    mod reproducibility {}
}
