//! Feature fusion, adaptive fine-grained enhancement and the final sum.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Graph, Init};
use crate::ops;
use crate::tape::Var;

pub fn init_fusion<R: Rng>(init: &mut Init<'_, R>, din: usize, d_f: usize) {
    init.linear("fuse", din, d_f, true);
}

/// `T_u = FC([T_s ⊕ T_a])`; with no semantic branch `T_u = FC(T_a)`.
pub fn fuse(g: &mut Graph<'_>, t_s: Option<Var>, t_a: Var) -> Result<Var> {
    let x = match t_s {
        Some(s) => ops::concat_last(&mut g.tape, s, t_a)?,
        None => t_a,
    };
    g.linear("fuse", x)
}

/// `d_s → d_f` projection, its batch norm and `groups + 1` gate weights
/// drawn from a standard normal.
pub fn init_afem<R: Rng>(init: &mut Init<'_, R>, d_s: usize, d_f: usize, groups: usize) {
    init.linear("afem.proj", d_s, d_f, true);
    init.batch_norm("afem.bn", d_f);
    init.normal("afem.w", &[groups + 1], 1.0);
}

/// `y = relu(bn(proj(T_s)))`, channel `c` scaled by `1 + w_0 + w_{g(c)}`.
///
/// Returns `(T_s', y)`; `y` is the ungated input, kept for tests of the
/// degenerate all-zero-weight form.
pub fn afem_forward(g: &mut Graph<'_>, t_s: Var, groups: usize) -> Result<(Var, Var)> {
    let h = g.linear("afem.proj", t_s)?;
    let h = g.batch_norm("afem.bn", h)?;
    let y = ops::relu(&mut g.tape, h)?;
    let w = g.param("afem.w")?;
    let d_f = g.tape.shape(y)[1];
    if groups == 0 || d_f % groups != 0 {
        return Err(Error::Config(format!("model.groups {groups} must divide d_f {d_f}")));
    }
    let out = ops::group_gate(&mut g.tape, y, w, groups)?;
    Ok((out, y))
}

/// `T = T_u + T_s' + side`, any of the last two possibly absent.
pub fn final_feature(g: &mut Graph<'_>, t_u: Var, t_s_prime: Option<Var>, side: Option<Var>) -> Result<Var> {
    let mut t = t_u;
    for extra in [t_s_prime, side].into_iter().flatten() {
        t = ops::add(&mut g.tape, t, extra)?;
    }
    Ok(t)
}
