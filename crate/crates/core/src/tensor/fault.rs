//! Deliberate fault injection for exercising the verification suite.
//!
//! Never enabled in normal operation; the `verify` harness and its tests flip
//! it to confirm that a broken gradient is actually caught. The flag is
//! per thread, so an injected fault cannot leak into concurrently running
//! tests.

use std::cell::Cell;

thread_local! {
    static CONV_BACKWARD_SIGN_FLIP: Cell<bool> = const { Cell::new(false) };
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negates the weight gradient produced by `conv2d`.
    ConvBackwardSignFlip,
}

impl std::str::FromStr for Fault {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "conv-backward-sign-flip" => Ok(Fault::ConvBackwardSignFlip),
            _ => Err(format!("unknown fault {s:?}")),
        }
    }
}

pub fn inject(fault: Fault) {
    match fault {
        Fault::ConvBackwardSignFlip => CONV_BACKWARD_SIGN_FLIP.with(|f| f.set(true)),
    }
}

pub fn clear() {
    CONV_BACKWARD_SIGN_FLIP.with(|f| f.set(false));
}

pub(crate) fn conv_backward_sign() -> f64 {
    if CONV_BACKWARD_SIGN_FLIP.with(Cell::get) {
        -1.0
    } else {
        1.0
    }
}
