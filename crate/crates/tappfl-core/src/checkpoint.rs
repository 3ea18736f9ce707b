//! Line-oriented text format for parameter tensors.
//!
//! Each tensor is two lines:
//!
//! ```text
//! tensor <name> <dim0> <dim1> ...
//! <v0> <v1> ... (flat, row-major)
//! ```
//!
//! Values are written with 17 significant digits, which round-trips every
//! finite f64 bit-exactly. Non-finite values are rejected at write time;
//! the engine never produces them.

use crate::error::{Error, Result};
use crate::nn::DenseNet;
use crate::tensor::ParamTensor;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write as _;

/// Serializes named tensors in order.
pub fn write_tensors(tensors: &[(String, &ParamTensor)]) -> Result<String> {
    let mut out = String::new();
    for (name, t) in tensors {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::InvalidConfig {
                reason: format!("tensor name {name:?} must be non-empty without spaces"),
            });
        }
        let _ = write!(out, "tensor {name}");
        for d in t.shape() {
            let _ = write!(out, " {d}");
        }
        out.push('\n');
        for (i, v) in t.data().iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteInput { what: "checkpoint tensor" });
            }
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{v:.16e}");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Parses the output of [`write_tensors`]. Returned tensors carry fresh ids.
pub fn read_tensors(text: &str) -> Result<Vec<(String, ParamTensor)>> {
    let mut out = Vec::new();
    let mut lines = text.lines().enumerate();
    while let Some((ln, header)) = lines.next() {
        if header.trim().is_empty() {
            continue;
        }
        let mut fields = header.split_whitespace();
        if fields.next() != Some("tensor") {
            return Err(Error::Parse {
                line: ln + 1,
                reason: String::from("expected a 'tensor' header line"),
            });
        }
        let name = fields
            .next()
            .ok_or(Error::Parse {
                line: ln + 1,
                reason: String::from("missing tensor name"),
            })?
            .to_string();
        let mut shape = Vec::new();
        for f in fields {
            shape.push(f.parse::<usize>().map_err(|_| Error::Parse {
                line: ln + 1,
                reason: format!("bad dimension {f:?}"),
            })?);
        }
        if shape.is_empty() {
            return Err(Error::Parse {
                line: ln + 1,
                reason: String::from("tensor header without dimensions"),
            });
        }
        let (vln, vline) = lines.next().ok_or(Error::Parse {
            line: ln + 2,
            reason: String::from("missing value line"),
        })?;
        let mut data = Vec::with_capacity(shape.iter().product());
        for f in vline.split_whitespace() {
            let v = f.parse::<f64>().map_err(|_| Error::Parse {
                line: vln + 1,
                reason: format!("bad value {f:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: vln + 1,
                    reason: format!("non-finite value {f:?}"),
                });
            }
            data.push(v);
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Parse {
                line: vln + 1,
                reason: format!("expected {expected} values, got {}", data.len()),
            });
        }
        out.push((name, ParamTensor::new(shape, data)?));
    }
    Ok(out)
}

/// Serializes a net's parameters as `<prefix>.layer<k>.{weight,bias}`.
pub fn write_net(net: &DenseNet, prefix: &str) -> Result<String> {
    let mut named = Vec::new();
    for (k, layer) in net.layers().iter().enumerate() {
        named.push((format!("{prefix}.layer{k}.weight"), &layer.weight));
        named.push((format!("{prefix}.layer{k}.bias"), &layer.bias));
    }
    write_tensors(&named)
}

/// Loads parameters saved by [`write_net`] into a structurally matching
/// net. Shapes must agree tensor by tensor.
pub fn load_net(net: &mut DenseNet, text: &str, prefix: &str) -> Result<()> {
    let tensors = read_tensors(text)?;
    let n_layers = net.layers().len();
    let expected = n_layers * 2;
    let mut found = 0usize;
    for k in 0..n_layers {
        for part in ["weight", "bias"] {
            let name = format!("{prefix}.layer{k}.{part}");
            let src = tensors
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or(Error::ShapeMismatch {
                    context: format!("checkpoint missing tensor {name}"),
                })?;
            let idx = k * 2 + if part == "weight" { 0 } else { 1 };
            let dst = net.params_mut().nth(idx).ok_or(Error::ShapeMismatch {
                context: String::from("net has fewer params than expected"),
            })?;
            if dst.shape() != src.1.shape() {
                return Err(Error::ShapeMismatch {
                    context: format!(
                        "tensor {name}: checkpoint {:?} vs net {:?}",
                        src.1.shape(),
                        dst.shape()
                    ),
                });
            }
            dst.data_mut().copy_from_slice(src.1.data());
            found += 1;
        }
    }
    debug_assert_eq!(found, expected);
    Ok(())
}
