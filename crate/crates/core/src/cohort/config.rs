use serde::{Deserialize, Serialize};

use super::{CohortError, DataType, TypeTriple};

/// One synthetic outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiseaseSpec {
    pub name: String,
    pub target_prevalence: f64,
    /// Codes, per data type, whose presence raises risk.
    pub signal_codes: TypeTriple<Vec<u32>>,
    /// Scale of the standard-logistic follow-up noise.
    pub noise_level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub n_people: usize,
    pub vocab_sizes: TypeTriple<usize>,
    pub mean_codes: TypeTriple<f64>,
    pub n_regions: usize,
    pub region_weights: Vec<f64>,
    pub diseases: Vec<DiseaseSpec>,
    /// Fraction of people missing at least one data type.
    pub unpaired_fraction: f64,
    pub latent_dim: usize,
    /// Standard deviation of `loading · h` for a unit-norm latent direction.
    #[serde(default = "default_latent_strength")]
    pub latent_strength: f64,
    /// Zipf exponent of base code popularity.
    #[serde(default = "default_popularity_exponent")]
    pub popularity_exponent: f64,
    pub seed: u64,
}

fn default_latent_strength() -> f64 {
    3.0
}

fn default_popularity_exponent() -> f64 {
    1.0
}

/// People per region in the original 34-region study population.
pub const ORIGINAL_REGION_COUNTS: [(&str, usize); 34] = [
    ("Alabama", 154),
    ("Arizona", 485),
    ("Arkansas", 163),
    ("California", 9074),
    ("Colorado", 326),
    ("Delaware", 1979),
    ("District of Columbia", 254),
    ("Florida", 4759),
    ("Georgia", 2279),
    ("Illinois", 1522),
    ("Indiana", 888),
    ("Kansas", 124),
    ("Kentucky", 641),
    ("Louisiana", 399),
    ("Maryland", 1889),
    ("Michigan", 2890),
    ("Minnesota", 163),
    ("Mississippi", 233),
    ("Missouri", 229),
    ("Nevada", 1898),
    ("New York", 8188),
    ("North Carolina", 1260),
    ("Ohio", 7346),
    ("Oklahoma", 512),
    ("Oregon", 134),
    ("Pennsylvania", 16557),
    ("South Carolina", 839),
    ("Tennessee", 1439),
    ("Texas", 11411),
    ("Utah", 114),
    ("Virginia", 1905),
    ("Washington", 514),
    ("West Virginia", 1391),
    ("Wisconsin", 184),
];

/// Region weights of the desk preset: one dominant region down to a 2% one.
pub const DESK_REGION_WEIGHTS: [f64; 9] = [0.22, 0.05, 0.15, 0.02, 0.12, 0.10, 0.18, 0.09, 0.07];

/// `n` codes spread evenly over the `pool` most popular ones.
fn signal_codes(disease: usize, pool: usize, n: usize) -> Vec<u32> {
    let pool = pool.max(n);
    let stride = (pool / n).max(1);
    let offset = 1 + 5 * disease;
    let mut codes: Vec<u32> = (0..n).map(|i| ((offset + i * stride) % pool) as u32).collect();
    codes.sort_unstable();
    codes.dedup();
    codes
}

/// Three outcomes with prevalences 16,824 / 8,265 / 8,044 out of 82,143.
pub fn default_diseases(vocab: &TypeTriple<usize>) -> Vec<DiseaseSpec> {
    let specs = [("diabetes", 0.205), ("psychological", 0.10), ("ischemic_heart", 0.098)];
    specs
        .iter()
        .enumerate()
        .map(|(d, &(name, prevalence))| DiseaseSpec {
            name: name.to_owned(),
            target_prevalence: prevalence,
            signal_codes: TypeTriple::new(
                // many weak diagnosis codes, a few stronger medications and labs
                signal_codes(d, vocab.diag * 2 / 3, 80),
                signal_codes(d, vocab.med / 8, 4),
                signal_codes(d, vocab.lab / 8, 4),
            ),
            noise_level: 0.5,
        })
        .collect()
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig::desk()
    }
}

impl CohortConfig {
    /// Laptop-scale preset: 10,000 people over 9 regions.
    pub fn desk() -> Self {
        let vocab_sizes = TypeTriple::new(500, 300, 200);
        CohortConfig {
            n_people: 10_000,
            diseases: default_diseases(&vocab_sizes),
            vocab_sizes,
            mean_codes: TypeTriple::new(13.6, 6.9, 7.4),
            n_regions: DESK_REGION_WEIGHTS.len(),
            region_weights: DESK_REGION_WEIGHTS.to_vec(),
            unpaired_fraction: 0.2,
            latent_dim: 8,
            latent_strength: default_latent_strength(),
            popularity_exponent: default_popularity_exponent(),
            seed: 42,
        }
    }

    /// Full-size preset: 82,143 people over the 34 original regions.
    pub fn paper_scale() -> Self {
        let total: usize = ORIGINAL_REGION_COUNTS.iter().map(|r| r.1).sum();
        let mut weights: Vec<f64> = ORIGINAL_REGION_COUNTS.iter().map(|r| r.1 as f64 / total as f64).collect();
        // absorb rounding so the weights sum to one
        let residual = 1.0 - weights.iter().sum::<f64>();
        weights[25] += residual;
        CohortConfig {
            n_people: 82_143,
            n_regions: weights.len(),
            region_weights: weights,
            ..CohortConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<(), CohortError> {
        let bad = |m: String| Err(CohortError::InvalidConfig(m));
        for t in DataType::ALL {
            if self.vocab_sizes[t] == 0 {
                return bad(format!("vocab_sizes.{t} must be positive"));
            }
            let m = self.mean_codes[t];
            if !(m > 0.0 && m < self.vocab_sizes[t] as f64) {
                return bad(format!("mean_codes.{t} must be in (0, vocab_sizes.{t})"));
            }
        }
        if self.n_regions == 0 {
            return bad("n_regions must be positive".into());
        }
        if self.region_weights.len() != self.n_regions {
            return bad(format!(
                "region_weights has {} entries, n_regions is {}",
                self.region_weights.len(),
                self.n_regions
            ));
        }
        if self.region_weights.iter().any(|w| w.is_nan() || *w < 0.0) {
            return bad("region_weights must be nonnegative".into());
        }
        let sum: f64 = self.region_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("region_weights sum to {sum}, expected 1"));
        }
        if !(0.0..1.0).contains(&self.unpaired_fraction) {
            return bad("unpaired_fraction must be in [0, 1)".into());
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive".into());
        }
        if !(self.latent_strength >= 0.0 && self.latent_strength.is_finite()) {
            return bad("latent_strength must be finite and nonnegative".into());
        }
        if !self.popularity_exponent.is_finite() {
            return bad("popularity_exponent must be finite".into());
        }
        for (i, d) in self.diseases.iter().enumerate() {
            if !(d.target_prevalence > 0.0 && d.target_prevalence < 1.0) {
                return bad(format!("diseases[{i}].target_prevalence must be in (0, 1)"));
            }
            if !(d.noise_level >= 0.0 && d.noise_level.is_finite()) {
                return bad(format!("diseases[{i}].noise_level must be >= 0"));
            }
            if DataType::ALL.iter().all(|&t| d.signal_codes[t].is_empty()) {
                return bad(format!("diseases[{i}] needs signal codes for at least one type"));
            }
            for t in DataType::ALL {
                if d.signal_codes[t].iter().any(|&c| c as usize >= self.vocab_sizes[t]) {
                    return bad(format!("diseases[{i}].signal_codes.{t} out of vocabulary"));
                }
            }
        }
        Ok(())
    }
}
