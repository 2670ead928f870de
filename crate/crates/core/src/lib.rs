//! Verify-gated completion admission control.
//!
//! Work is performed elsewhere; this crate decides whether a completion
//! claim may surface. Claims and their supporting state live in a
//! [`packet::PacketStore`], every decision is written to an append-only
//! [`ledger::Ledger`], and the [`gate`] is the only place an outcome is
//! produced.

pub mod accounting;
pub mod digest;
pub mod gate;
pub mod ids;
pub mod ledger;
pub mod lifecycle;
pub mod packet;
pub mod pgv;
pub mod recovery;
pub mod runtime;
