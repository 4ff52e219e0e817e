//! Least-squares GAN objectives shared by the mel and waveform discriminators.
//!
//! Every discriminator emits a score map; a term is the mean over that map.
//! Generator: `sum_d mean((1 - D_d(fake))^2)`.
//! Discriminator `d`: `mean((1 - D_d(real))^2) + mean(D_d(fake)^2)`.

use cantus_nn::{Graph, Var};

use crate::error::{Error, Result};

/// `mean((1 - s)^2)` of one score map.
pub fn generator_term(g: &mut Graph, fake: Var) -> Var {
    let d = g.affine(fake, -1.0, 1.0);
    let sq = g.square(d);
    g.mean(sq)
}

/// `mean((1 - real)^2) + mean(fake^2)` of one discriminator.
pub fn discriminator_term(g: &mut Graph, real: Var, fake: Var) -> Var {
    let r = generator_term(g, real);
    let f = g.square(fake);
    let f = g.mean(f);
    g.add(r, f)
}

/// Sum of generator terms; `expected` guards against band/length mismatches.
pub fn generator_loss(g: &mut Graph, fake: &[Var], expected: usize) -> Result<Var> {
    if fake.len() != expected || fake.is_empty() {
        return Err(Error::Contract(format!("{} score maps for {expected} discriminators", fake.len())));
    }
    let terms: Vec<Var> = fake.iter().map(|&f| generator_term(g, f)).collect();
    Ok(g.add_all(&terms))
}

/// One discriminator loss per pair.
pub fn discriminator_losses(g: &mut Graph, real: &[Var], fake: &[Var]) -> Result<Vec<Var>> {
    if real.len() != fake.len() {
        return Err(Error::Contract(format!("{} real vs {} fake score maps", real.len(), fake.len())));
    }
    Ok(real.iter().zip(fake).map(|(&r, &f)| discriminator_term(g, r, f)).collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Plain-value generator loss.
pub fn generator_loss_value(fake: &[&[f64]]) -> f64 {
    fake.iter().map(|s| mean(&s.iter().map(|x| (1.0 - x) * (1.0 - x)).collect::<Vec<_>>())).sum()
}

/// Plain-value discriminator loss.
pub fn discriminator_loss_value(real: &[f64], fake: &[f64]) -> f64 {
    mean(&real.iter().map(|x| (1.0 - x) * (1.0 - x)).collect::<Vec<_>>()) + mean(&fake.iter().map(|x| x * x).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use cantus_nn::Tensor;

    fn maps(g: &mut Graph, vals: &[f64], n: usize) -> Vec<Var> {
        (0..n).map(|_| g.constant(Tensor::new(&[vals.len()], vals.to_vec()))).collect()
    }

    #[test]
    fn graph_and_value_forms_agree() {
        let mut g = Graph::new();
        let vals = [0.1, -0.4, 1.3, 0.9];
        let fakes = maps(&mut g, &vals, 3);
        let l = generator_loss(&mut g, &fakes, 3).unwrap();
        let want = generator_loss_value(&[&vals, &vals, &vals]);
        assert!((g.value(l).item() - want).abs() < 1e-14);
        let reals = maps(&mut g, &[0.7, 0.2], 3);
        let d = discriminator_losses(&mut g, &reals, &fakes).unwrap();
        let want = discriminator_loss_value(&[0.7, 0.2], &vals);
        assert!((g.value(d[1]).item() - want).abs() < 1e-14);
        assert!(generator_loss(&mut g, &fakes, 2).is_err());
        assert!(discriminator_losses(&mut g, &reals[..2], &fakes).is_err());
    }
}
