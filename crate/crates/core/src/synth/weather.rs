use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RawGrid;
use crate::error::{config_err, Error, Result};

pub const FOG_GRAY: f32 = 0.5;
const RAIN_ATTENUATION: f32 = 0.35;
const SNOW_LEVEL: f32 = 1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeatherKind {
    #[default]
    None,
    Fog,
    Rain,
    Snow,
    FogRain,
    FogSnow,
    RainSnow,
}

impl WeatherKind {
    /// The single corruptions applied, in order.
    pub fn stages(self) -> &'static [WeatherKind] {
        use WeatherKind::*;
        match self {
            None => &[],
            Fog => &[Fog],
            Rain => &[Rain],
            Snow => &[Snow],
            FogRain => &[Fog, Rain],
            FogSnow => &[Fog, Snow],
            RainSnow => &[Rain, Snow],
        }
    }
}

impl std::str::FromStr for WeatherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        use WeatherKind::*;
        Ok(match s.to_ascii_lowercase().as_str() {
            "none" => None,
            "fog" => Fog,
            "rain" => Rain,
            "snow" => Snow,
            "fog-rain" => FogRain,
            "fog-snow" => FogSnow,
            "rain-snow" => RainSnow,
            other => return Err(config_err!("unknown weather kind {other:?}")),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Weather {
    pub kind: WeatherKind,
    pub severity: f64,
}

/// Corrupt a view. Severity 0 returns the input unchanged.
pub fn apply_weather(view: &RawGrid, kind: WeatherKind, severity: f64, seed: u64) -> Result<RawGrid> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(config_err!("severity must lie in [0, 1], got {severity}"));
    }
    let mut out = view.clone();
    for (i, &stage) in kind.stages().iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        match stage {
            WeatherKind::Fog => fog(&mut out, severity as f32),
            WeatherKind::Rain => rain(&mut out, severity, &mut rng),
            WeatherKind::Snow => snow(&mut out, severity, &mut rng),
            _ => unreachable!("compound kinds expand to single stages"),
        }
    }
    Ok(out)
}

fn fog(g: &mut RawGrid, s: f32) {
    if s == 0.0 {
        return;
    }
    for x in &mut g.data {
        *x = (1.0 - s) * *x + s * FOG_GRAY;
    }
}

fn rain(g: &mut RawGrid, s: f64, rng: &mut ChaCha8Rng) {
    let n = g.size;
    let streaks = (s * n as f64).round() as usize;
    for _ in 0..streaks {
        let r0 = rng.random_range(0..n);
        let c0 = rng.random_range(0..n);
        let len = rng.random_range(n / 8..=n / 3).max(1);
        for t in 0..len {
            let (r, c) = (r0 + t, c0 + t);
            if r >= n || c >= n {
                break;
            }
            let p = g.px(r, c);
            g.set_px(r, c, p.map(|v| v * RAIN_ATTENUATION));
        }
    }
}

fn snow(g: &mut RawGrid, s: f64, rng: &mut ChaCha8Rng) {
    let n = g.size;
    let flakes = (s * 0.08 * (n * n) as f64).round() as usize;
    for _ in 0..flakes {
        let r = rng.random_range(0..n);
        let c = rng.random_range(0..n);
        g.set_px(r, c, [SNOW_LEVEL; 3]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};

    fn ramp() -> RawGrid {
        let mut g = RawGrid::filled(32, 0.0);
        for (i, x) in g.data.iter_mut().enumerate() {
            *x = (i % 97) as f32 / 97.0;
        }
        g
    }

    #[test]
    fn zero_severity_is_identity() {
        let g = ramp();
        for kind in ["fog", "rain", "snow", "fog-rain", "fog-snow", "rain-snow"] {
            let k: WeatherKind = kind.parse().unwrap();
            assert_eq!(apply_weather(&g, k, 0.0, 9).unwrap(), g);
        }
    }

    #[test]
    fn full_fog_is_flat_gray() {
        let out = apply_weather(&ramp(), WeatherKind::Fog, 1.0, 0).unwrap();
        assert!(out.data.iter().all(|&x| x == FOG_GRAY));
    }

    #[test]
    fn unknown_kind_is_config_error() {
        let e = "hail".parse::<WeatherKind>().unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn rain_only_darkens() {
        let g = ramp();
        let out = apply_weather(&g, WeatherKind::Rain, 0.7, 1).unwrap();
        assert!(out.data.iter().zip(&g.data).all(|(a, b)| a <= b));
        assert_ne!(out, g);
    }

    #[test]
    fn rain_golden_checksum() {
        let g = RawGrid::filled(32, 0.8);
        let out = apply_weather(&g, WeatherKind::Rain, 0.5, 3).unwrap();
        let bytes: Vec<u8> = out.data.iter().flat_map(|x| x.to_le_bytes()).collect();
        let digest = hex::encode(Sha256::digest(&bytes));
        assert_eq!(digest, RAIN_GOLDEN);
    }

    const RAIN_GOLDEN: &str = "57734987128c800b6872994382ec57de175d187eac549be476531f68b661482f";
}
