use crate::tensor::{Binding, Real, RopeTable, Tape, Var};
use crate::Result;

/// Width and MLP ratio of a pre-norm transformer block.
#[derive(Debug, Clone, Copy)]
pub struct BlockShape {
    pub dim: usize,
    pub mlp_ratio: usize,
}

impl BlockShape {
    pub fn new(dim: usize, mlp_ratio: usize) -> Self {
        Self { dim, mlp_ratio }
    }

    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let d = self.dim;
        let h = d * self.mlp_ratio;
        vec![
            ("ln1.g", vec![d]),
            ("ln1.b", vec![d]),
            ("qkv.w", vec![d, 3 * d]),
            ("qkv.b", vec![3 * d]),
            ("proj.w", vec![d, d]),
            ("proj.b", vec![d]),
            ("ln2.g", vec![d]),
            ("ln2.b", vec![d]),
            ("fc1.w", vec![d, h]),
            ("fc1.b", vec![h]),
            ("fc2.w", vec![h, d]),
            ("fc2.b", vec![d]),
        ]
    }
}

/// `x·W + b` with parameters `{prefix}.w` and `{prefix}.b`.
pub fn linear<T: Real>(tape: &mut Tape<T>, p: &Binding<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.w"))?;
    let b = p.var(&format!("{prefix}.b"))?;
    let y = tape.matmul(x, w)?;
    Ok(tape.add(y, b)?)
}

pub fn norm<T: Real>(tape: &mut Tape<T>, p: &Binding<T>, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let g = p.var(&format!("{prefix}.g"))?;
    let b = p.var(&format!("{prefix}.b"))?;
    Ok(tape.layernorm(x, g, b, T::c(eps))?)
}

/// Pre-norm block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`. Rotary
/// positions, when given, rotate queries and keys inside every head.
pub fn transformer_block<T: Real>(
    tape: &mut Tape<T>,
    p: &Binding<T>,
    prefix: &str,
    x: Var,
    heads: usize,
    rope: Option<&RopeTable<T>>,
    eps: f64,
) -> Result<Var> {
    let d = tape.shape(x)[1];
    let h = norm(tape, p, &format!("{prefix}.ln1"), x, eps)?;
    let qkv = linear(tape, p, &format!("{prefix}.qkv"), h)?;
    let mut q = tape.slice(qkv, 1, 0, d)?;
    let mut k = tape.slice(qkv, 1, d, d)?;
    let v = tape.slice(qkv, 1, 2 * d, d)?;
    if let Some(table) = rope {
        q = tape.rope(q, table)?;
        k = tape.rope(k, table)?;
    }
    let a = tape.attention(q, k, v, heads)?;
    let a = linear(tape, p, &format!("{prefix}.proj"), a)?;
    let x = tape.add(x, a)?;
    let h = norm(tape, p, &format!("{prefix}.ln2"), x, eps)?;
    let h = linear(tape, p, &format!("{prefix}.fc1"), h)?;
    let h = tape.gelu(h);
    let h = linear(tape, p, &format!("{prefix}.fc2"), h)?;
    Ok(tape.add(x, h)?)
}
