//! Plain-text tensor serialization.
//!
//! The format is a whitespace-separated token stream: four dimension tokens
//! `n c h w`, then exactly `n*c*h*w` finite decimal values in row-major
//! order. The writer emits one spatial row per line with `{}` formatting, so
//! a parse of the written text reproduces the tensor bit for bit.
//!
//! The parser is written to be safe on arbitrary input: it counts tokens
//! before allocating anything and checks the element count with overflow-safe
//! arithmetic, so hostile headers cannot trigger huge allocations.

use std::fmt::Write as _;

use super::{Shape4, Tensor4};

#[derive(Debug, PartialEq, Eq, thiserror::Error)]
pub enum TextError {
    #[error("tensor text needs 4 dimension tokens, found {got}")]
    MissingDims { got: usize },
    #[error("bad dimension token {token:?}")]
    BadDim { token: String },
    #[error("dimensions {shape} overflow the element count")]
    Overflow { shape: String },
    #[error("expected {expected} values, found {got}")]
    CountMismatch { expected: usize, got: usize },
    #[error("bad value token {token:?}")]
    BadValue { token: String },
    #[error("non-finite value token {token:?}")]
    NonFinite { token: String },
}

/// Truncates a hostile token before embedding it in an error message.
pub(crate) fn snip(token: &str) -> String {
    const MAX: usize = 40;
    if token.len() <= MAX {
        token.to_string()
    } else {
        let mut cut = MAX;
        while !token.is_char_boundary(cut) {
            cut -= 1;
        }
        format!("{}...", &token[..cut])
    }
}

pub fn parse_tensor(text: &str) -> Result<Tensor4, TextError> {
    let mut tokens = text.split_whitespace();
    let mut dims = [0usize; 4];
    for (i, dim) in dims.iter_mut().enumerate() {
        let token = tokens.next().ok_or(TextError::MissingDims { got: i })?;
        *dim = token
            .parse::<usize>()
            .map_err(|_| TextError::BadDim { token: snip(token) })?;
    }
    let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
    let expected = shape
        .checked_count()
        .ok_or_else(|| TextError::Overflow {
            shape: shape.to_string(),
        })?;

    // Count the remaining tokens before allocating the data buffer.
    let got = tokens.clone().count();
    if got != expected {
        return Err(TextError::CountMismatch { expected, got });
    }

    let mut data = Vec::with_capacity(expected);
    for token in tokens {
        let v = token
            .parse::<f64>()
            .map_err(|_| TextError::BadValue { token: snip(token) })?;
        if !v.is_finite() {
            return Err(TextError::NonFinite { token: snip(token) });
        }
        data.push(v);
    }
    Ok(Tensor4::from_vec(shape, data).expect("token count was verified against the shape"))
}

pub fn write_tensor(t: &Tensor4) -> String {
    let s = t.shape();
    let mut out = String::new();
    let _ = writeln!(out, "{} {} {} {}", s.n, s.c, s.h, s.w);
    for ni in 0..s.n {
        for c in 0..s.c {
            let plane = t.plane(ni, c);
            for row in plane.chunks(s.w.max(1)) {
                let mut first = true;
                for v in row {
                    if !first {
                        out.push(' ');
                    }
                    first = false;
                    let _ = write!(out, "{v}");
                }
                out.push('\n');
            }
        }
    }
    out
}
