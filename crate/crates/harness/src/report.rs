//! Plain-text bound reports and the curse-of-dimensionality grid.

use std::fmt::Write as _;
use std::path::Path;

use bilevel_core::bounds::{
    cod_bound, cod_montecarlo, cv_gap_bound, gd_hp_bound, kappa, lipschitz_growth_order, ud_gd_beta, ud_sgd_beta,
    BoundInputs, CodCheck,
};

use crate::error::{HarnessError, Result};

pub fn load_bound_inputs(path: &Path) -> Result<BoundInputs> {
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_bound_inputs(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

pub fn parse_bound_inputs(text: &str) -> Result<BoundInputs> {
    let inputs: BoundInputs = toml::from_str(text)?;
    if !(inputs.delta > 0.0 && inputs.delta < 1.0) {
        return Err(HarnessError::Config(format!(
            "delta: must lie in (0, 1), got {}",
            inputs.delta
        )));
    }
    for (name, v) in [("m", inputs.m), ("n", inputs.n), ("d", inputs.d), ("T", inputs.t)] {
        if v == 0 {
            return Err(HarnessError::Config(format!("{name}: must be at least 1")));
        }
    }
    Ok(inputs)
}

/// Every bound that applies to `inputs`, one block per formula.
pub fn bound_report(inputs: &BoundInputs) -> Result<String> {
    let mut out = String::new();
    let w = |out: &mut String, s: &dyn std::fmt::Display| {
        let _ = writeln!(out, "{s}");
    };
    w(&mut out, &format!("{inputs:?}\n"));
    w(&mut out, &kappa(inputs)?);
    w(&mut out, &ud_sgd_beta(inputs)?);
    let gd = ud_gd_beta(inputs)?;
    w(&mut out, &gd);
    let beta = inputs.beta.unwrap_or(gd.value);
    w(&mut out, &gd_hp_bound(inputs, beta)?);
    w(&mut out, &cv_gap_bound(inputs)?);
    w(&mut out, &lipschitz_growth_order(inputs));
    let _ = writeln!(
        out,
        "[cod_bound]\nvalue = {}\n",
        cod_bound(inputs.l, inputs.d, inputs.t)
    );
    Ok(out)
}

/// `‖λ‖∞` on `[0,1]^d`: 1-Lipschitz in the Euclidean norm, infimum 0.
pub fn sup_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn cod_grid(dims: &[u64], ts: &[u64], trials: usize, seed: u64) -> Result<Vec<CodCheck>> {
    let mut out = Vec::new();
    for &d in dims {
        for &t in ts {
            out.push(cod_montecarlo(&sup_norm, 0.0, 1.0, d, t, trials, seed)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_delta_is_named() {
        let err = parse_bound_inputs("delta = 1.5").unwrap_err();
        assert!(err.to_string().contains("delta"));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_bound_inputs("gamme = 1.0").unwrap_err();
        assert!(err.to_string().contains("gamme"), "{err}");
    }
}
