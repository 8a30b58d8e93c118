//! Mirror of `book/` as rustdoc modules. The chapters are included verbatim,
//! so `cargo test -p coopsim-guide` compiles and runs every code block in the
//! book; a snippet drifting from the library API fails here, not on a reader.

#[doc = include_str!("../../../README.md")]
pub mod readme {}

#[doc = include_str!("../../../book/src/intro.md")]
pub mod intro {}

#[doc = include_str!("../../../book/src/world.md")]
pub mod world {}

#[doc = include_str!("../../../book/src/perception.md")]
pub mod perception {}

#[doc = include_str!("../../../book/src/channel.md")]
pub mod channel {}

#[doc = include_str!("../../../book/src/coalition.md")]
pub mod coalition {}

#[doc = include_str!("../../../book/src/scheduling.md")]
pub mod scheduling {}

#[doc = include_str!("../../../book/src/running.md")]
pub mod running {}
