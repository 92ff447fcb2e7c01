//! Plain-text program dump.
//!
//! ```text
//! vars <n>
//! var <id> <name> <objective coef>
//! psd <label> <dim>        | linear <label>
//! const <i> <j> <value>    (upper triangle)
//! coef <var> <i> <j> <value>
//! end
//! ```

use std::fmt::Write;

use super::ipm::LmiData;
use super::{LinearConstraint, PsdConstraint};
use crate::scalar::Real;

pub(super) fn write<T: Real>(
    names: &[String],
    data: &LmiData<T>,
    psd: &[PsdConstraint<T>],
    linear: &[LinearConstraint<T>],
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "vars {}", data.nvars);
    for (i, name) in names.iter().enumerate() {
        let _ = writeln!(out, "var {i} {name} {:e}", data.c[i].as_f64());
    }
    let labels = psd.iter().map(|c| ("psd", c.label.as_str())).chain(linear.iter().map(|c| ("linear", c.label.as_str())));
    for ((kind, label), block) in labels.zip(&data.blocks) {
        if kind == "psd" {
            let _ = writeln!(out, "psd {} {}", label.replace(' ', "_"), block.dim);
        } else {
            let _ = writeln!(out, "linear {}", label.replace(' ', "_"));
        }
        for i in 0..block.dim {
            for j in i..block.dim {
                let v = block.f0[(i, j)];
                if v != T::zero() {
                    let _ = writeln!(out, "const {i} {j} {:e}", v.as_f64());
                }
            }
        }
        for vb in &block.vars {
            for &(i, j, c) in &vb.entries {
                if i <= j {
                    let _ = writeln!(out, "coef {} {i} {j} {:e}", vb.var, c.as_f64());
                }
            }
        }
        let _ = writeln!(out, "end");
    }
    out
}
