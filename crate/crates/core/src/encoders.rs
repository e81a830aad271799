//! Input features: multi-scale sinusoidal location encoding, learnable
//! sinusoidal time encoding, region/special embeddings and fixed positional
//! encoding.
//!
//! Token feature layout (width `model_dim`):
//! `[space (4S) | arrival time (T) | departure time (T) | embedding (E)]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::SECONDS_PER_DAY;
use crate::tape::Mat;
use crate::types::{Point, Seconds, Token};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub s2v_scales: usize,
    /// Smallest wavelength scale, meters.
    pub s2v_min: f64,
    /// Largest scale, meters; the diameter of the area of interest.
    pub s2v_max: f64,
    pub t2v_dim: usize,
    pub region_emb_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { s2v_scales: 64, s2v_min: 1.0, s2v_max: 40_000.0, t2v_dim: 16, region_emb_dim: 32 }
    }
}

impl EncoderConfig {
    pub fn space_dim(&self) -> usize {
        4 * self.s2v_scales
    }

    pub fn model_dim(&self) -> usize {
        self.space_dim() + 2 * self.t2v_dim + self.region_emb_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.s2v_scales == 0 || self.t2v_dim == 0 || self.region_emb_dim == 0 {
            return Err(Error::Config("encoder dimensions must be at least 1".into()));
        }
        if !(self.s2v_min > 0.0 && self.s2v_min < self.s2v_max) {
            return Err(Error::Config(format!("need 0 < s2v_min ({}) < s2v_max ({})", self.s2v_min, self.s2v_max)));
        }
        Ok(())
    }

    /// Geometric scale ladder from `s2v_min` to `s2v_max`.
    pub fn scales(&self) -> Vec<f64> {
        let n = self.s2v_scales;
        if n == 1 {
            return vec![self.s2v_min];
        }
        let ratio = self.s2v_max / self.s2v_min;
        (0..n).map(|s| self.s2v_min * ratio.powf(s as f64 / (n - 1) as f64)).collect()
    }
}

/// Scale-major `[sin(x/l), cos(x/l), sin(y/l), cos(y/l)]` for each scale `l`.
pub fn space2vec(p: &Point, cfg: &EncoderConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.space_dim());
    for l in cfg.scales() {
        let (sx, cx) = (p.x / l).sin_cos();
        let (sy, cy) = (p.y / l).sin_cos();
        out.extend_from_slice(&[sx, cx, sy, cy]);
    }
    out
}

/// Learnable time-encoding parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Time2VecParams {
    pub omega: Vec<f64>,
    pub phi: Vec<f64>,
}

/// Slot 0 is linear, `omega[0] t + phi[0]`; slot i > 0 is `sin(omega[i] t + phi[i])`.
pub fn time2vec(t: f64, params: &Time2VecParams) -> Vec<f64> {
    params
        .omega
        .iter()
        .zip(&params.phi)
        .enumerate()
        .map(|(i, (w, p))| if i == 0 { w * t + p } else { (w * t + p).sin() })
        .collect()
}

/// Time fed to the time encoding: rebased seconds in days.
pub fn time_feature(t: Seconds) -> f64 {
    t as f64 / SECONDS_PER_DAY
}

/// Embedding tables the input features draw from.
pub struct EmbeddingTables<'a> {
    pub time: &'a Time2VecParams,
    /// `V x E`, indexed by vocabulary id.
    pub embedding: &'a Mat,
}

/// Feature vector of one token. `id` is the token's vocabulary id.
pub fn embed_input(token: &Token, id: u32, cfg: &EncoderConfig, tables: &EmbeddingTables) -> Result<Vec<f64>> {
    let row = id as usize;
    if row >= tables.embedding.nrows() {
        return Err(Error::Vocabulary(id));
    }
    let mut out = Vec::with_capacity(cfg.model_dim());
    match token {
        Token::Visit(v) => {
            out.extend(space2vec(&v.location, cfg));
            out.extend(time2vec(time_feature(v.arrival), tables.time));
            out.extend(time2vec(time_feature(v.departure), tables.time));
        }
        _ => out.resize(cfg.space_dim() + 2 * cfg.t2v_dim, 0.0),
    }
    out.extend(tables.embedding.row(row).iter());
    Ok(out)
}

/// Fixed sinusoidal positions: channel `2i` is `sin(p / 10000^(2i/d))`,
/// channel `2i + 1` the matching cosine.
pub fn positional_encoding(len: usize, dim: usize) -> Mat {
    Mat::from_shape_fn((len, dim), |(p, c)| {
        let i = (c / 2) as f64;
        let angle = p as f64 / 10_000f64.powf(2.0 * i / dim as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

pub fn positional_encode(x: &Mat) -> Mat {
    x + &positional_encoding(x.nrows(), x.ncols())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Visit;
    use std::f64::consts::PI;

    fn cfg() -> EncoderConfig {
        EncoderConfig { s2v_scales: 3, s2v_min: 1.0, s2v_max: 100.0, t2v_dim: 4, region_emb_dim: 2 }
    }

    #[test]
    fn space2vec_origin() {
        let e = space2vec(&Point::new(0.0, 0.0), &cfg());
        for s in 0..3 {
            assert_eq!(&e[4 * s..4 * s + 4], &[0.0, 1.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn space2vec_periodic_per_scale() {
        let c = cfg();
        let p = Point::new(3.7, -12.0);
        let base = space2vec(&p, &c);
        for (s, l) in c.scales().iter().enumerate() {
            let shifted = space2vec(&Point::new(p.x + 2.0 * PI * l, p.y), &c);
            for k in 0..4 {
                assert!((base[4 * s + k] - shifted[4 * s + k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn space2vec_scale_zero() {
        let c = EncoderConfig { s2v_scales: 2, s2v_min: 1.0, s2v_max: 100.0, ..cfg() };
        let e = space2vec(&Point::new(1.0, 0.0), &c);
        let expected = [0.841_47, 0.540_30, 0.0, 1.0];
        for k in 0..4 {
            assert!((e[k] - expected[k]).abs() < 1e-5);
        }
        assert!((c.scales()[1] - 100.0).abs() < 1e-9);
    }

    #[test]
    fn time2vec_cases() {
        let zero = Time2VecParams { omega: vec![0.0; 4], phi: vec![0.0; 4] };
        assert_eq!(time2vec(5.0, &zero), vec![0.0; 4]);
        let p = Time2VecParams { omega: vec![0.7, PI / 2.0, 1.0, 2.0], phi: vec![0.1, 0.0, 0.3, -0.2] };
        let t = 1.0;
        assert!((time2vec(t, &p)[1] - 1.0).abs() < 1e-12);
        let lin = time2vec(2.0 * 3.3, &p)[0] - time2vec(3.3, &p)[0];
        assert!((lin - 0.7 * 3.3).abs() < 1e-12);
    }

    fn tables() -> (Time2VecParams, Mat) {
        let t = Time2VecParams { omega: vec![0.5, 1.0, 2.0, 3.0], phi: vec![0.0, 0.1, 0.2, 0.3] };
        let e = Mat::from_shape_fn((6, 2), |(i, j)| (i * 2 + j) as f64 * 0.1);
        (t, e)
    }

    #[test]
    fn embed_input_rules() {
        let c = cfg();
        let (t, e) = tables();
        let tb = EmbeddingTables { time: &t, embedding: &e };
        let v = Visit::new(1, 3600, 7200, Point::new(10.0, 20.0));
        let a = embed_input(&Token::Visit(v), 1, &c, &tb).unwrap();
        assert_eq!(a.len(), c.model_dim());
        assert_eq!(a, embed_input(&Token::Visit(v), 1, &c, &tb).unwrap());
        let b = embed_input(&Token::Visit(Visit { region: 2, ..v }), 2, &c, &tb).unwrap();
        let split = c.model_dim() - c.region_emb_dim;
        assert_eq!(a[..split], b[..split]);
        assert_ne!(a[split..], b[split..]);
        let blank = embed_input(&Token::Blank, 4, &c, &tb).unwrap();
        assert_eq!(blank.len(), c.model_dim());
        assert!(blank[..split].iter().all(|x| *x == 0.0));
        assert!(matches!(embed_input(&Token::Blank, 6, &c, &tb), Err(Error::Vocabulary(6))));
    }

    #[test]
    fn positional_cases() {
        let x = Mat::from_elem((3, 6), 0.5);
        let y = positional_encode(&x);
        for c in (0..6).step_by(2) {
            assert_eq!(y[[0, c]], 0.5);
        }
        assert_ne!(y.row(1), y.row(2));
        let pe = positional_encoding(5, 6);
        let (p, i) = (3.0, 1.0);
        let angle: f64 = p / 10_000f64.powf(2.0 * i / 6.0);
        assert!((pe[[3, 2]] - angle.sin()).abs() < 1e-15);
        assert!((pe[[3, 3]] - angle.cos()).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig { s2v_min: 10.0, s2v_max: 5.0, ..cfg() }.validate().is_err());
        assert!(EncoderConfig { t2v_dim: 0, ..cfg() }.validate().is_err());
        assert_eq!(EncoderConfig::default().model_dim(), 320);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn encodings_bounded(x in -1e5f64..1e5, y in -1e5f64..1e5, t in -100.0f64..100.0) {
                for v in space2vec(&Point::new(x, y), &cfg()) {
                    prop_assert!((-1.0..=1.0).contains(&v));
                }
                let (p, _) = tables();
                for v in &time2vec(t, &p)[1..] {
                    prop_assert!((-1.0..=1.0).contains(v));
                }
            }
        }
    }
}
