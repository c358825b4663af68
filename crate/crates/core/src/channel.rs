//! Spatially non-stationary, dual-wideband near-field channel generator for a
//! uniform linear array observed over K pilot subcarriers.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;

use rand::Rng;

use crate::error::{invalid, Error, IndexRange, Result};
use crate::linalg::{CMatrix, C64};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Uniform linear receive array.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayGeometry {
    n_antennas: usize,
    spacing: f64,
    carrier_hz: f64,
    wavelength: f64,
}

impl ArrayGeometry {
    pub fn new(n_antennas: usize, spacing: f64, carrier_hz: f64) -> Result<Self> {
        if n_antennas == 0 {
            return Err(invalid("n_antennas", "need at least one antenna"));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(invalid(
                "spacing",
                format!("{spacing} is not a positive length"),
            ));
        }
        if !(carrier_hz > 0.0 && carrier_hz.is_finite()) {
            return Err(invalid(
                "carrier_hz",
                format!("{carrier_hz} is not a positive frequency"),
            ));
        }
        Ok(Self {
            n_antennas,
            spacing,
            carrier_hz,
            wavelength: SPEED_OF_LIGHT / carrier_hz,
        })
    }

    /// Array with the usual half-wavelength element spacing.
    pub fn half_wavelength(n_antennas: usize, carrier_hz: f64) -> Result<Self> {
        if !(carrier_hz > 0.0 && carrier_hz.is_finite()) {
            return Err(invalid(
                "carrier_hz",
                format!("{carrier_hz} is not a positive frequency"),
            ));
        }
        Self::new(n_antennas, 0.5 * SPEED_OF_LIGHT / carrier_hz, carrier_hz)
    }

    pub fn n_antennas(&self) -> usize {
        self.n_antennas
    }
    pub fn spacing(&self) -> f64 {
        self.spacing
    }
    pub fn carrier_hz(&self) -> f64 {
        self.carrier_hz
    }
    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }
}

/// Pilot subcarrier layout.
#[derive(Debug, Clone, PartialEq)]
pub struct OfdmGrid {
    carrier_hz: f64,
    bandwidth_hz: f64,
    subcarrier_hz: Vec<f64>,
}

impl OfdmGrid {
    pub fn new(n_pilot_subcarriers: usize, carrier_hz: f64, bandwidth_hz: f64) -> Result<Self> {
        if n_pilot_subcarriers == 0 {
            return Err(invalid(
                "n_pilot_subcarriers",
                "need at least one subcarrier",
            ));
        }
        if !(carrier_hz > 0.0 && carrier_hz.is_finite()) {
            return Err(invalid(
                "carrier_hz",
                format!("{carrier_hz} is not a positive frequency"),
            ));
        }
        if !(bandwidth_hz > 0.0 && bandwidth_hz.is_finite()) {
            return Err(invalid(
                "bandwidth_hz",
                format!("{bandwidth_hz} is not a positive bandwidth"),
            ));
        }
        let k_total = n_pilot_subcarriers as f64;
        let subcarrier_hz = (1..=n_pilot_subcarriers)
            .map(|k| carrier_hz + bandwidth_hz * (k as f64 - 1.0 - (k_total - 1.0) / 2.0) / k_total)
            .collect();
        Ok(Self {
            carrier_hz,
            bandwidth_hz,
            subcarrier_hz,
        })
    }

    /// Frequency of pilot subcarrier `k`, counted from 1.
    pub fn subcarrier_frequency(&self, k: usize) -> Result<f64> {
        if k == 0 || k > self.subcarrier_hz.len() {
            return Err(Error::IndexOutOfRange {
                index: k,
                range: IndexRange {
                    lo: 1,
                    hi: self.subcarrier_hz.len(),
                },
            });
        }
        Ok(self.subcarrier_hz[k - 1])
    }

    pub fn len(&self) -> usize {
        self.subcarrier_hz.len()
    }
    pub fn is_empty(&self) -> bool {
        self.subcarrier_hz.is_empty()
    }
    pub fn frequencies(&self) -> &[f64] {
        &self.subcarrier_hz
    }
    pub fn carrier_hz(&self) -> f64 {
        self.carrier_hz
    }
    pub fn bandwidth_hz(&self) -> f64 {
        self.bandwidth_hz
    }
}

/// Contiguous run of antennas that see a path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VisibilityRegion {
    start: usize,
    len: usize,
}

impl VisibilityRegion {
    pub fn new(start: usize, len: usize, n_antennas: usize) -> Result<Self> {
        if len == 0 {
            return Err(invalid("vr", "visibility region must contain an antenna"));
        }
        if start + len > n_antennas {
            return Err(invalid(
                "vr",
                format!(
                    "antennas {start}..{} exceed array of {n_antennas}",
                    start + len
                ),
            ));
        }
        Ok(Self { start, len })
    }

    /// Window of `round(fraction * n_antennas)` elements starting at `start`.
    pub fn from_fraction(fraction: f64, start: usize, n_antennas: usize) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(invalid("vr_fraction", format!("{fraction} not in (0, 1]")));
        }
        Self::new(start, vr_len(fraction, n_antennas), n_antennas)
    }

    pub fn start(&self) -> usize {
        self.start
    }
    pub fn len(&self) -> usize {
        self.len
    }
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
    pub fn end(&self) -> usize {
        self.start + self.len
    }
    pub fn contains(&self, n: usize) -> bool {
        n >= self.start && n < self.end()
    }
}

fn vr_len(fraction: f64, n_antennas: usize) -> usize {
    (fraction * n_antennas as f64).round() as usize
}

/// How a path reaches the visible antennas.
#[derive(Debug, Clone, PartialEq)]
pub enum Mechanism {
    /// Visible elements receive the path at full strength.
    LosBlockageOrReflection,
    /// Visible elements receive the path with a per-element amplitude taper,
    /// one strictly positive entry per element of the visibility region.
    Diffraction { profile: Vec<f64> },
}

/// Raised-cosine taper of length `len`, strictly positive and peaking at 1.
pub fn raised_cosine_profile(len: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..len)
        .map(|j| 0.5 * (1.0 - (2.0 * PI * (j as f64 + 1.0) / (len as f64 + 1.0)).cos()))
        .collect();
    let peak = raw.iter().cloned().fold(0.0, f64::max);
    raw.into_iter().map(|w| w / peak).collect()
}

/// One propagation path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathParams {
    gain: C64,
    distance_m: f64,
    angle_rad: f64,
    vr: VisibilityRegion,
    vr_fraction: f64,
    mechanism: Mechanism,
}

impl PathParams {
    /// `gain` is the complex gain before the carrier phase is folded in.
    pub fn new(
        gain: C64,
        distance_m: f64,
        angle_rad: f64,
        vr_fraction: f64,
        vr_start: usize,
        n_antennas: usize,
        mechanism: Mechanism,
    ) -> Result<Self> {
        if !(gain.re.is_finite() && gain.im.is_finite()) {
            return Err(invalid("gain", "non-finite path gain"));
        }
        if !(distance_m > 0.0 && distance_m.is_finite()) {
            return Err(invalid(
                "distance_m",
                format!("{distance_m} is not a positive distance"),
            ));
        }
        if !(angle_rad.abs() <= FRAC_PI_2) {
            return Err(invalid(
                "angle_rad",
                format!("{angle_rad} outside [-pi/2, pi/2]"),
            ));
        }
        let vr = VisibilityRegion::from_fraction(vr_fraction, vr_start, n_antennas)?;
        if let Mechanism::Diffraction { profile } = &mechanism {
            if profile.len() != vr.len() {
                return Err(invalid(
                    "diffraction_profile",
                    format!("{} entries for a region of {}", profile.len(), vr.len()),
                ));
            }
            if profile.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
                return Err(invalid("diffraction_profile", "entries must be positive"));
            }
        }
        Ok(Self {
            gain,
            distance_m,
            angle_rad,
            vr,
            vr_fraction,
            mechanism,
        })
    }

    /// Full-aperture reflection path, handy for tests and far-field checks.
    pub fn stationary(
        gain: C64,
        distance_m: f64,
        angle_rad: f64,
        n_antennas: usize,
    ) -> Result<Self> {
        Self::new(
            gain,
            distance_m,
            angle_rad,
            1.0,
            0,
            n_antennas,
            Mechanism::LosBlockageOrReflection,
        )
    }

    pub fn gain(&self) -> C64 {
        self.gain
    }
    pub fn distance_m(&self) -> f64 {
        self.distance_m
    }
    pub fn angle_rad(&self) -> f64 {
        self.angle_rad
    }
    pub fn vr(&self) -> VisibilityRegion {
        self.vr
    }
    pub fn vr_fraction(&self) -> f64 {
        self.vr_fraction
    }
    pub fn mechanism(&self) -> &Mechanism {
        &self.mechanism
    }

    /// Reference-element propagation delay r / c.
    pub fn delay(&self) -> f64 {
        self.distance_m / SPEED_OF_LIGHT
    }

    /// Linear phase slope per element, d cos(theta) / wavelength.
    pub fn spatial_frequency(&self, geometry: &ArrayGeometry) -> f64 {
        geometry.spacing * self.angle_rad.cos() / geometry.wavelength
    }

    /// Quadratic phase coefficient per element, d^2 sin^2(theta) / (2 r wavelength).
    pub fn curvature(&self, geometry: &ArrayGeometry) -> f64 {
        let s = self.angle_rad.sin();
        geometry.spacing * geometry.spacing * s * s / (2.0 * self.distance_m * geometry.wavelength)
    }

    /// Complex gain with the carrier phase of the reference delay folded in.
    pub fn equivalent_gain(&self, carrier_hz: f64) -> C64 {
        self.gain * C64::from_polar(1.0, -2.0 * PI * carrier_hz * self.delay())
    }
}

/// Second-order (Fresnel) delay of element `n`.
pub fn path_delay(path: &PathParams, geometry: &ArrayGeometry, n: usize) -> Result<f64> {
    if n >= geometry.n_antennas {
        return Err(Error::IndexOutOfRange {
            index: n,
            range: IndexRange {
                lo: 0,
                hi: geometry.n_antennas - 1,
            },
        });
    }
    let nf = n as f64;
    let fc = geometry.carrier_hz;
    Ok(path.delay() + path.spatial_frequency(geometry) * nf / fc
        - path.curvature(geometry) * nf * nf / fc)
}

/// Amplitude with which element `n` sees `path`.
pub fn sns_indicator(path: &PathParams, n: usize) -> f64 {
    if !path.vr.contains(n) {
        return 0.0;
    }
    match &path.mechanism {
        Mechanism::LosBlockageOrReflection => 1.0,
        Mechanism::Diffraction { profile } => profile[n - path.vr.start],
    }
}

pub fn spatial_steering(path: &PathParams, geometry: &ArrayGeometry) -> Vec<C64> {
    let psi = path.spatial_frequency(geometry);
    let phi = path.curvature(geometry);
    (0..geometry.n_antennas)
        .map(|n| {
            let nf = n as f64;
            C64::from_polar(1.0, -2.0 * PI * (psi * nf - phi * nf * nf))
        })
        .collect()
}

pub fn frequency_steering(path: &PathParams, grid: &OfdmGrid) -> Vec<C64> {
    let tau = path.delay();
    grid.subcarrier_hz
        .iter()
        .map(|f| C64::from_polar(1.0, -2.0 * PI * f * tau))
        .collect()
}

/// Per-subcarrier residual of the spatial phase (beam squint).
pub fn phase_matrix(path: &PathParams, geometry: &ArrayGeometry, grid: &OfdmGrid) -> CMatrix {
    let psi = path.spatial_frequency(geometry);
    let phi = path.curvature(geometry);
    let fc = geometry.carrier_hz;
    CMatrix::from_fn(geometry.n_antennas, grid.len(), |n, k| {
        let nf = n as f64;
        let f = grid.subcarrier_hz[k];
        C64::from_polar(1.0, -2.0 * PI * f * (nf * psi / fc - nf * nf * phi / fc))
    })
}

/// Spatial-frequency channel, antennas by subcarriers.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialFrequencyChannel {
    entries: CMatrix,
}

impl SpatialFrequencyChannel {
    pub fn from_entries(entries: CMatrix) -> Result<Self> {
        if entries
            .iter()
            .any(|z| !(z.re.is_finite() && z.im.is_finite()))
        {
            return Err(invalid("entries", "channel has non-finite entries"));
        }
        Ok(Self { entries })
    }
    pub fn entries(&self) -> &CMatrix {
        &self.entries
    }
    pub fn into_entries(self) -> CMatrix {
        self.entries
    }
}

/// Contribution of a single path.
pub fn path_component(path: &PathParams, geometry: &ArrayGeometry, grid: &OfdmGrid) -> CMatrix {
    let alpha = path.equivalent_gain(geometry.carrier_hz);
    let b = spatial_steering(path, geometry);
    let a = frequency_steering(path, grid);
    let mut h = phase_matrix(path, geometry, grid);
    for n in 0..geometry.n_antennas {
        let s = sns_indicator(path, n);
        let row_scale = alpha * b[n] * s;
        for (k, ak) in a.iter().enumerate() {
            h[(n, k)] *= row_scale * ak;
        }
    }
    h
}

pub fn assemble_channel(
    paths: &[PathParams],
    geometry: &ArrayGeometry,
    grid: &OfdmGrid,
) -> Result<SpatialFrequencyChannel> {
    let mut h = CMatrix::zeros(geometry.n_antennas, grid.len());
    for path in paths {
        if path.vr.end() > geometry.n_antennas {
            return Err(invalid("vr", "path built for a larger array"));
        }
        h += path_component(path, geometry, grid);
    }
    SpatialFrequencyChannel::from_entries(h)
}

/// Random scene statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub n_paths: usize,
    pub distance_range_m: (f64, f64),
    pub angle_range_rad: (f64, f64),
    /// Fractions are drawn from the half-open interval (lo, hi].
    pub vr_fraction_range: (f64, f64),
    /// Path 0 is a full-aperture line-of-sight path.
    pub line_of_sight: bool,
    /// Chance that a non-LoS path is diffracted rather than reflected.
    pub diffraction_probability: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_paths: 4,
            distance_range_m: (10.0, 50.0),
            angle_range_rad: (-FRAC_PI_2, FRAC_PI_2),
            vr_fraction_range: (0.0, 1.0),
            line_of_sight: true,
            diffraction_probability: 0.25,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (dlo, dhi) = self.distance_range_m;
        if !(dlo > 0.0 && dhi >= dlo && dhi.is_finite()) {
            return Err(invalid(
                "distance_range_m",
                format!("bad range [{dlo}, {dhi}]"),
            ));
        }
        let (alo, ahi) = self.angle_range_rad;
        if !(alo >= -FRAC_PI_2 && ahi <= FRAC_PI_2 && alo < ahi) {
            return Err(invalid(
                "angle_range_rad",
                format!("bad range ({alo}, {ahi})"),
            ));
        }
        let (rlo, rhi) = self.vr_fraction_range;
        if !(rlo >= 0.0 && rhi <= 1.0 && rhi > 0.0 && rlo <= rhi) {
            return Err(invalid(
                "vr_fraction_range",
                format!("bad range ({rlo}, {rhi}]"),
            ));
        }
        if !(0.0..=1.0).contains(&self.diffraction_probability) {
            return Err(invalid("diffraction_probability", "must be a probability"));
        }
        Ok(())
    }
}

/// Draw a random scene. The draw order per path is fixed (angle, distance,
/// visibility fraction, window start, gain phase, mechanism) so that a seed
/// always reproduces the same scene.
pub fn generate_scene<R: Rng + ?Sized>(
    config: &SceneConfig,
    geometry: &ArrayGeometry,
    rng: &mut R,
) -> Result<Vec<PathParams>> {
    config.validate()?;
    let n_ant = geometry.n_antennas;
    let (alo, ahi) = config.angle_range_rad;
    let (dlo, dhi) = config.distance_range_m;
    let (rlo, rhi) = config.vr_fraction_range;
    let mut paths = Vec::with_capacity(config.n_paths);
    for l in 0..config.n_paths {
        let angle = loop {
            let a = rng.random_range(alo..ahi);
            if a > alo {
                break a;
            }
        };
        let distance = if dhi > dlo {
            rng.random_range(dlo..=dhi)
        } else {
            dlo
        };
        let los = config.line_of_sight && l == 0;
        let fraction = if los {
            1.0
        } else {
            loop {
                let u: f64 = rng.random();
                let rho = rhi - u * (rhi - rlo);
                if vr_len(rho, n_ant) >= 1 {
                    break rho;
                }
            }
        };
        let len = vr_len(fraction, n_ant);
        let start = rng.random_range(0..=n_ant - len);
        let gain = C64::from_polar(1.0, rng.random_range(-PI..PI));
        let diffracted = !los && rng.random::<f64>() < config.diffraction_probability;
        let mechanism = if diffracted {
            Mechanism::Diffraction {
                profile: raised_cosine_profile(len),
            }
        } else {
            Mechanism::LosBlockageOrReflection
        };
        paths.push(PathParams::new(
            gain, distance, angle, fraction, start, n_ant, mechanism,
        )?);
    }
    Ok(paths)
}

const SCENE_HEADER: &str =
    "# gain_re gain_im distance_m angle_rad vr_fraction vr_start mechanism [profile...]";

/// One whitespace-separated record per path. Diffracted paths carry their
/// profile after the mechanism token.
pub fn scene_to_text(paths: &[PathParams]) -> String {
    let mut out = String::from(SCENE_HEADER);
    out.push('\n');
    for p in paths {
        let _ = write!(
            out,
            "{} {} {} {} {} {}",
            p.gain.re, p.gain.im, p.distance_m, p.angle_rad, p.vr_fraction, p.vr.start
        );
        match &p.mechanism {
            Mechanism::LosBlockageOrReflection => out.push_str(" reflection"),
            Mechanism::Diffraction { profile } => {
                out.push_str(" diffraction");
                for w in profile {
                    let _ = write!(out, " {w}");
                }
            }
        }
        out.push('\n');
    }
    out
}

pub fn scene_from_text(text: &str, n_antennas: usize) -> Result<Vec<PathParams>> {
    let mut paths = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: idx + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 7 {
            return Err(parse_err(format!(
                "expected at least 7 fields, found {}",
                fields.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|e| parse_err(format!("field {}: {e}", i + 1)))
        };
        let start: usize = fields[5]
            .parse()
            .map_err(|e| parse_err(format!("vr_start: {e}")))?;
        let mechanism = match fields[6] {
            "reflection" => Mechanism::LosBlockageOrReflection,
            "diffraction" => Mechanism::Diffraction {
                profile: (7..fields.len()).map(num).collect::<Result<_>>()?,
            },
            other => return Err(parse_err(format!("unknown mechanism `{other}`"))),
        };
        paths.push(PathParams::new(
            C64::new(num(0)?, num(1)?),
            num(2)?,
            num(3)?,
            num(4)?,
            start,
            n_antennas,
            mechanism,
        )?);
    }
    Ok(paths)
}
