//! Domain data model, file ingestion, and the synthetic fleet generator.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{relative_asymmetry, symmetric_eigenvalues};

pub const NUM_CHANNELS: usize = 20;
pub const NCM_DIM: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Broken,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Broken => "broken",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s {
            "normal" => Some(Label::Normal),
            "broken" => Some(Label::Broken),
            _ => None,
        }
    }

    pub fn class_index(&self) -> usize {
        match self {
            Label::Normal => 0,
            Label::Broken => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Measured,
    Augmented,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Measured => "measured",
            Provenance::Augmented => "augmented",
        }
    }

    pub fn parse(s: &str) -> Option<Provenance> {
        match s {
            "measured" => Some(Provenance::Measured),
            "augmented" => Some(Provenance::Augmented),
            _ => None,
        }
    }
}

/// One coil channel's scalar features for one measurement event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSample {
    pub coil_id: String,
    pub channel_index: usize,
    /// noise_level, csp, body_coil_ratio, csp_isocenter_ratio
    pub features: [f64; 4],
    pub label: Label,
}

/// One coil's 20x20 noise covariance matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NcmSample {
    pub coil_id: String,
    /// Row-major 20x20, symmetric PSD.
    pub matrix: Vec<f64>,
    pub label: Label,
    pub provenance: Provenance,
}

impl NcmSample {
    /// Symmetry within 1e-9 relative, PSD within -1e-9 of the largest
    /// eigenvalue magnitude, non-negative diagonal.
    pub fn validate(&self) -> Result<()> {
        if self.matrix.len() != NCM_DIM * NCM_DIM {
            return Err(Error::Validation(format!(
                "coil {}: matrix has {} entries, want {}",
                self.coil_id,
                self.matrix.len(),
                NCM_DIM * NCM_DIM
            )));
        }
        if self.matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "coil {}: non-finite matrix entry",
                self.coil_id
            )));
        }
        let asym = relative_asymmetry(&self.matrix, NCM_DIM);
        if asym > 1e-9 {
            return Err(Error::Validation(format!(
                "coil {}: matrix asymmetric ({:.3e} relative)",
                self.coil_id, asym
            )));
        }
        for i in 0..NCM_DIM {
            if self.matrix[i * NCM_DIM + i] < 0.0 {
                return Err(Error::Validation(format!(
                    "coil {}: negative diagonal entry at {}",
                    self.coil_id, i
                )));
            }
        }
        let eigs = symmetric_eigenvalues(&self.matrix, NCM_DIM);
        let max_abs = eigs.iter().fold(0.0f64, |a, &e| a.max(e.abs()));
        if eigs[0] < -1e-9 * max_abs {
            return Err(Error::Validation(format!(
                "coil {}: matrix not PSD (min eigenvalue {:.3e})",
                self.coil_id, eigs[0]
            )));
        }
        Ok(())
    }
}

/// Channel and NCM samples grouped by coil, with derived per-coil labels.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub channel: Vec<ChannelSample>,
    pub ncm: Vec<NcmSample>,
    coil_labels: BTreeMap<String, Label>,
}

impl Dataset {
    pub fn from_parts(channel: Vec<ChannelSample>, ncm: Vec<NcmSample>) -> Result<Dataset> {
        let mut coil_labels: BTreeMap<String, Label> = BTreeMap::new();
        for s in &channel {
            let e = coil_labels.entry(s.coil_id.clone()).or_insert(Label::Normal);
            if s.label == Label::Broken {
                *e = Label::Broken;
            }
        }
        for s in &ncm {
            let e = coil_labels.entry(s.coil_id.clone()).or_insert(Label::Normal);
            if s.label == Label::Broken {
                *e = Label::Broken;
            }
        }
        // per-coil channel rows must come in complete measurement events
        let mut per_coil_counts: BTreeMap<&str, [usize; NUM_CHANNELS]> = BTreeMap::new();
        for s in &channel {
            if s.channel_index >= NUM_CHANNELS {
                return Err(Error::Validation(format!(
                    "coil {}: channel index {} out of range",
                    s.coil_id, s.channel_index
                )));
            }
            per_coil_counts.entry(&s.coil_id).or_default()[s.channel_index] += 1;
        }
        for (coil, counts) in &per_coil_counts {
            let first = counts[0];
            if counts.iter().any(|&c| c != first) {
                return Err(Error::Validation(format!(
                    "coil {coil}: incomplete measurement event (uneven channel counts)"
                )));
            }
        }
        Ok(Dataset {
            channel,
            ncm,
            coil_labels,
        })
    }

    /// Coil ids in lexicographic order.
    pub fn coil_ids(&self) -> Vec<&str> {
        self.coil_labels.keys().map(|s| s.as_str()).collect()
    }

    pub fn coil_label(&self, coil_id: &str) -> Option<Label> {
        self.coil_labels.get(coil_id).copied()
    }

    pub fn coil_labels(&self) -> &BTreeMap<String, Label> {
        &self.coil_labels
    }
}

/// Per-feature distribution parameters for one class: (mean, std) of
/// noise_level's log, csp, body_coil_ratio, csp_isocenter_ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassFeatureParams {
    pub log_noise: (f64, f64),
    pub csp: (f64, f64),
    pub body_coil_ratio: (f64, f64),
    pub csp_isocenter_ratio: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub coils: usize,
    pub channel_measurements_per_coil: usize,
    pub ncm_measurements_per_coil: usize,
    pub broken_fraction: f64,
    pub normal_features: ClassFeatureParams,
    pub broken_features: ClassFeatureParams,
    /// Pairwise correlation between healthy channels' noise.
    pub ncm_coupling: f64,
    /// Noise variance multiplier for broken channels.
    pub broken_variance_multiplier: f64,
    /// Fraction of a broken channel's noise leaked into its two
    /// nearest-index neighbors.
    pub neighbor_leak: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            coils: 1000,
            channel_measurements_per_coil: 1,
            ncm_measurements_per_coil: 1,
            broken_fraction: 0.068,
            normal_features: ClassFeatureParams {
                log_noise: (0.0, 0.30),
                csp: (20.0, 2.5),
                body_coil_ratio: (1.0, 0.10),
                csp_isocenter_ratio: (0.80, 0.08),
            },
            broken_features: ClassFeatureParams {
                log_noise: (1.0, 0.40),
                csp: (13.8, 3.0),
                body_coil_ratio: (0.88, 0.15),
                csp_isocenter_ratio: (0.70, 0.12),
            },
            ncm_coupling: 0.30,
            broken_variance_multiplier: 2.7,
            neighbor_leak: 0.30,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.coils == 0 {
            return Err(Error::Contract("coil count must be positive".into()));
        }
        if self.channel_measurements_per_coil == 0 || self.ncm_measurements_per_coil == 0 {
            return Err(Error::Contract(
                "measurements per coil must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.broken_fraction) {
            return Err(Error::Contract(format!(
                "broken fraction {} outside [0,1]",
                self.broken_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.ncm_coupling) {
            return Err(Error::Contract("coupling must be in [0,1)".into()));
        }
        Ok(())
    }
}

/// Number of noise draws behind each simulated covariance estimate.
const NCM_SNAPSHOTS: usize = 48;

fn draw(rng: &mut ChaCha8Rng, (mean, std): (f64, f64)) -> f64 {
    Normal::new(mean, std).unwrap().sample(rng)
}

/// Synthetic stand-in for the proprietary fleet data: per-channel scalar
/// features plus per-coil noise covariance matrices. Deterministic in the
/// spec's seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut channel = Vec::new();
    let mut ncm = Vec::new();
    let width = spec.coils.to_string().len().max(4);

    for coil_idx in 0..spec.coils {
        let coil_id = format!("coil{coil_idx:0width$}");
        let coil_broken = rng.gen::<f64>() < spec.broken_fraction;
        let mut broken_channels = [false; NUM_CHANNELS];
        if coil_broken {
            let n_broken = rng.gen_range(1..=3usize);
            let mut placed = 0;
            while placed < n_broken {
                let c = rng.gen_range(0..NUM_CHANNELS);
                if !broken_channels[c] {
                    broken_channels[c] = true;
                    placed += 1;
                }
            }
        }
        // neighbor channels of broken ones get a weakened noise up-shift
        let mut neighbor = [false; NUM_CHANNELS];
        for c in 0..NUM_CHANNELS {
            if broken_channels[c] {
                if c > 0 && !broken_channels[c - 1] {
                    neighbor[c - 1] = true;
                }
                if c + 1 < NUM_CHANNELS && !broken_channels[c + 1] {
                    neighbor[c + 1] = true;
                }
            }
        }

        for _event in 0..spec.channel_measurements_per_coil {
            for ch in 0..NUM_CHANNELS {
                let p = if broken_channels[ch] {
                    &spec.broken_features
                } else {
                    &spec.normal_features
                };
                let mut log_noise = draw(&mut rng, p.log_noise);
                if neighbor[ch] {
                    // reduced-strength leak from the adjacent broken channel
                    log_noise += spec.neighbor_leak
                        * (spec.broken_features.log_noise.0 - spec.normal_features.log_noise.0);
                }
                let features = [
                    log_noise.exp(),
                    draw(&mut rng, p.csp),
                    draw(&mut rng, p.body_coil_ratio),
                    draw(&mut rng, p.csp_isocenter_ratio),
                ];
                channel.push(ChannelSample {
                    coil_id: coil_id.clone(),
                    channel_index: ch,
                    features,
                    label: if broken_channels[ch] {
                        Label::Broken
                    } else {
                        Label::Normal
                    },
                });
            }
        }

        for _event in 0..spec.ncm_measurements_per_coil {
            ncm.push(simulate_ncm(
                &coil_id,
                &broken_channels,
                coil_broken,
                spec,
                &mut rng,
            ));
        }
    }
    Dataset::from_parts(channel, ncm)
}

fn simulate_ncm(
    coil_id: &str,
    broken_channels: &[bool; NUM_CHANNELS],
    coil_broken: bool,
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
) -> NcmSample {
    let rho = spec.ncm_coupling;
    let mult = spec.broken_variance_multiplier;
    let t = NCM_SNAPSHOTS;
    let mut snapshots = vec![0.0f64; t * NUM_CHANNELS];
    let gauss = Normal::new(0.0, 1.0).unwrap();
    for snap in snapshots.chunks_mut(NUM_CHANNELS) {
        let shared: f64 = gauss.sample(rng);
        let mut own = [0.0f64; NUM_CHANNELS];
        for (c, o) in own.iter_mut().enumerate() {
            let e: f64 = gauss.sample(rng);
            *o = if broken_channels[c] {
                // broken: inflated, decorrelated noise
                mult.sqrt() * e
            } else {
                rho.sqrt() * shared + (1.0 - rho).sqrt() * e
            };
        }
        for c in 0..NUM_CHANNELS {
            snap[c] = own[c];
            if !broken_channels[c] {
                // leak from adjacent broken channels
                if c > 0 && broken_channels[c - 1] {
                    snap[c] += spec.neighbor_leak * own[c - 1];
                }
                if c + 1 < NUM_CHANNELS && broken_channels[c + 1] {
                    snap[c] += spec.neighbor_leak * own[c + 1];
                }
            }
        }
    }
    // population sample covariance over the snapshots
    let mut mean = [0.0f64; NUM_CHANNELS];
    for snap in snapshots.chunks(NUM_CHANNELS) {
        for (m, &v) in mean.iter_mut().zip(snap) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= t as f64;
    }
    let mut cov = vec![0.0f64; NUM_CHANNELS * NUM_CHANNELS];
    for snap in snapshots.chunks(NUM_CHANNELS) {
        for i in 0..NUM_CHANNELS {
            let di = snap[i] - mean[i];
            for j in i..NUM_CHANNELS {
                cov[i * NUM_CHANNELS + j] += di * (snap[j] - mean[j]);
            }
        }
    }
    for i in 0..NUM_CHANNELS {
        for j in i..NUM_CHANNELS {
            let v = cov[i * NUM_CHANNELS + j] / t as f64;
            cov[i * NUM_CHANNELS + j] = v;
            cov[j * NUM_CHANNELS + i] = v;
        }
    }
    NcmSample {
        coil_id: coil_id.to_string(),
        matrix: cov,
        label: if coil_broken {
            Label::Broken
        } else {
            Label::Normal
        },
        provenance: Provenance::Measured,
    }
}

pub const CHANNEL_HEADER: &str =
    "coil_id,channel_index,noise_level,csp,body_coil_ratio,csp_isocenter_ratio,label";

fn ncm_header(with_provenance: bool) -> String {
    let mut h = String::from("coil_id,label");
    if with_provenance {
        h.push_str(",provenance");
    }
    for i in 0..NCM_DIM {
        for j in 0..NCM_DIM {
            let _ = write!(h, ",m_{i}_{j}");
        }
    }
    h
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

pub fn load_channel_table(path: &Path) -> Result<Vec<ChannelSample>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == CHANNEL_HEADER => {}
        Some((_, header)) => {
            return Err(parse_err(
                path,
                1,
                format!("unexpected header '{header}', want '{CHANNEL_HEADER}'"),
            ))
        }
        None => return Err(parse_err(path, 1, "empty file")),
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected 7 fields, got {}", fields.len()),
            ));
        }
        let channel_index: usize = fields[1]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad channel_index '{}'", fields[1])))?;
        if channel_index >= NUM_CHANNELS {
            return Err(parse_err(
                path,
                lineno,
                format!("channel_index {channel_index} outside [0,{NUM_CHANNELS})"),
            ));
        }
        let mut features = [0.0; 4];
        for (k, f) in features.iter_mut().enumerate() {
            let raw = fields[2 + k];
            *f = raw
                .parse::<f64>()
                .map_err(|_| parse_err(path, lineno, format!("non-numeric feature '{raw}'")))?;
            if !f.is_finite() {
                return Err(parse_err(path, lineno, format!("non-finite feature '{raw}'")));
            }
        }
        let label = Label::parse(fields[6])
            .ok_or_else(|| parse_err(path, lineno, format!("bad label '{}'", fields[6])))?;
        out.push(ChannelSample {
            coil_id: fields[0].to_string(),
            channel_index,
            features,
            label,
        });
    }
    Ok(out)
}

pub fn save_channel_table(path: &Path, samples: &[ChannelSample]) -> Result<()> {
    let mut out = String::with_capacity(samples.len() * 64);
    out.push_str(CHANNEL_HEADER);
    out.push('\n');
    for s in samples {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.coil_id,
            s.channel_index,
            s.features[0],
            s.features[1],
            s.features[2],
            s.features[3],
            s.label.as_str()
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_ncm_records(path: &Path) -> Result<Vec<NcmSample>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let with_provenance = match lines.next() {
        Some((_, h)) if h == ncm_header(false) => false,
        Some((_, h)) if h == ncm_header(true) => true,
        Some((_, h)) => {
            let shown: String = h.chars().take(40).collect();
            return Err(parse_err(
                path,
                1,
                format!("unexpected NCM header starting '{shown}...'"),
            ));
        }
        None => return Err(parse_err(path, 1, "empty file")),
    };
    let fixed = if with_provenance { 3 } else { 2 };
    let mut out = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let got_vals = fields.len().saturating_sub(fixed);
        if got_vals != NCM_DIM * NCM_DIM {
            return Err(parse_err(
                path,
                lineno,
                format!(
                    "expected {} matrix values, got {}",
                    NCM_DIM * NCM_DIM,
                    got_vals
                ),
            ));
        }
        let label = Label::parse(fields[1])
            .ok_or_else(|| parse_err(path, lineno, format!("bad label '{}'", fields[1])))?;
        let provenance = if with_provenance {
            Provenance::parse(fields[2])
                .ok_or_else(|| parse_err(path, lineno, format!("bad provenance '{}'", fields[2])))?
        } else {
            Provenance::Measured
        };
        let mut matrix = Vec::with_capacity(NCM_DIM * NCM_DIM);
        for raw in &fields[fixed..] {
            let v: f64 = raw
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("non-numeric entry '{raw}'")))?;
            matrix.push(v);
        }
        let sample = NcmSample {
            coil_id: fields[0].to_string(),
            matrix,
            label,
            provenance,
        };
        sample.validate().map_err(|e| {
            parse_err(path, lineno, format!("record failed validation: {e}"))
        })?;
        out.push(sample);
    }
    Ok(out)
}

/// Writes the provenance column iff any sample is augmented.
pub fn save_ncm_records(path: &Path, samples: &[NcmSample]) -> Result<()> {
    let with_provenance = samples
        .iter()
        .any(|s| s.provenance == Provenance::Augmented);
    let mut out = String::new();
    out.push_str(&ncm_header(with_provenance));
    out.push('\n');
    for s in samples {
        out.push_str(&s.coil_id);
        out.push(',');
        out.push_str(s.label.as_str());
        if with_provenance {
            out.push(',');
            out.push_str(s.provenance.as_str());
        }
        for v in &s.matrix {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
