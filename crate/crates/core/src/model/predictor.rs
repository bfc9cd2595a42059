use std::collections::HashSet;

use super::blocks::{linear, norm, transformer_block};
use super::rope::{self, ResolutionScale};
use super::{Coord, Modality, ModelConfig};
use crate::tensor::{Binding, Real, Tape, Var};
use crate::{Error, Result};

/// Predicts every level for the context rows followed by one mask token per
/// entry of `mask_pos`. Returns `K` maps of shape `[N_c + N_m, out_dim]`.
#[allow(clippy::too_many_arguments)]
pub fn predict<T: Real>(
    tape: &mut Tape<T>,
    p: &Binding<T>,
    cfg: &ModelConfig,
    context: Var,
    ctx_pos: &[Coord],
    mask_pos: &[Coord],
    modality: Modality,
    scale: ResolutionScale,
) -> Result<Vec<Var>> {
    let n_c = tape.shape(context)[0];
    if n_c != ctx_pos.len() {
        return Err(Error::Input(format!("{n_c} context rows but {} positions", ctx_pos.len())));
    }
    let mut seen: HashSet<Coord> = HashSet::with_capacity(n_c + mask_pos.len());
    for c in ctx_pos.iter().chain(mask_pos) {
        if !seen.insert(*c) {
            return Err(Error::Input(format!("position {c:?} appears more than once")));
        }
    }

    let mut x = context;
    if !mask_pos.is_empty() {
        let tok = p.var("pred.mask_token")?;
        let masks = tape.gather_rows(tok, &vec![0; mask_pos.len()])?;
        x = tape.concat(&[x, masks], 0)?;
    }
    if cfg.multimodal_tokenizer {
        let m = p.var(&format!("pred.modality.{}", modality.name()))?;
        x = tape.add(x, m)?;
    }
    let positions: Vec<Coord> = ctx_pos.iter().chain(mask_pos).copied().collect();
    let table = rope::table::<T>(&positions, cfg.predictor_head_dim(), cfg.rope_base, scale)?;
    for block in 0..cfg.predictor_depth {
        x = transformer_block(tape, p, &format!("pred.{block}"), x, cfg.predictor_heads, Some(&table), cfg.ln_eps)?;
    }
    let x = norm(tape, p, "pred.norm", x, cfg.ln_eps)?;
    (0..cfg.levels()).map(|k| linear(tape, p, &format!("pred.head{k}"), x)).collect()
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::rope::NATIVE;
    use crate::tensor::Tensor;

    fn setup() -> (ModelConfig, crate::tensor::ParamStore<f64>) {
        let cfg = ModelConfig::default();
        let params = cfg.init_params::<f64>(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        (cfg, params)
    }

    fn ctx(tape: &mut Tape<f64>, n: usize) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        tape.constant(Tensor::from_fn(&[n, 48], |_| rng.random_range(-1.0..1.0)))
    }

    #[test]
    fn output_shapes() {
        let (cfg, params) = setup();
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, false);
        let c = ctx(&mut tape, 6);
        let cp: Vec<Coord> = (0..6).map(|i| [0, 0, i]).collect();
        let mp = [[0, 1, 0], [0, 1, 1]];
        let out = predict(&mut tape, &b, &cfg, c, &cp, &mp, Modality::Image, NATIVE).unwrap();
        assert_eq!(out.len(), 4);
        for o in out {
            assert_eq!(tape.shape(o), &[8, 64]);
        }
    }

    #[test]
    fn no_mask_positions_still_predicts_context() {
        let (cfg, params) = setup();
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, false);
        let c = ctx(&mut tape, 5);
        let cp: Vec<Coord> = (0..5).map(|i| [0, i, 0]).collect();
        let out = predict(&mut tape, &b, &cfg, c, &cp, &[], Modality::Video, NATIVE).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(tape.shape(out[0]), &[5, 64]);
    }

    #[test]
    fn mask_rows_follow_their_positions() {
        let (cfg, params) = setup();
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, false);
        let c = ctx(&mut tape, 4);
        let cp: Vec<Coord> = (0..4).map(|i| [0, 0, i]).collect();
        let mp = [[0, 1, 0], [0, 1, 1], [0, 2, 3]];
        let rev = [mp[2], mp[1], mp[0]];
        let a = predict(&mut tape, &b, &cfg, c, &cp, &mp, Modality::Image, NATIVE).unwrap();
        let r = predict(&mut tape, &b, &cfg, c, &cp, &rev, Modality::Image, NATIVE).unwrap();
        for (x, y) in a.iter().zip(&r) {
            let (x, y) = (tape.value(*x), tape.value(*y));
            for k in 0..3 {
                for (u, v) in x.row(4 + k).iter().zip(y.row(4 + 2 - k)) {
                    assert!((u - v).abs() < 1e-12);
                }
            }
            for k in 0..4 {
                for (u, v) in x.row(k).iter().zip(y.row(k)) {
                    assert!((u - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn colliding_positions_are_rejected() {
        let (cfg, params) = setup();
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, false);
        let c = ctx(&mut tape, 2);
        let cp = [[0, 0, 0], [0, 0, 1]];
        let r = predict(&mut tape, &b, &cfg, c, &cp, &[[0, 0, 1]], Modality::Image, NATIVE);
        assert!(matches!(r, Err(Error::Input(_))));
        let r = predict(&mut tape, &b, &cfg, c, &cp, &[[1, 0, 0], [1, 0, 0]], Modality::Image, NATIVE);
        assert!(matches!(r, Err(Error::Input(_))));
    }
}
