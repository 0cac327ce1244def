use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::pnm::{read_pnm, write_pnm};
use super::synth::{render, IdentityTemplate, LightRoster, PoseRoster};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "filename,identity,pose_id,light_id,yaw_deg";

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    /// `H x W x C`, values in `[0, 1]`.
    pub image: Tensor,
    pub identity: usize,
    pub pose: usize,
    pub light: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub identities: usize,
    pub poses: PoseRoster,
    pub lights: LightRoster,
    pub height: usize,
    pub width: usize,
    /// 1 writes PGM, 3 writes PPM.
    pub channels: usize,
    pub seed: u64,
}

impl CorpusSpec {
    /// Desk-scale corpus: 13 yaw bins, 8 lights, 67x67 RGB.
    pub fn desk(identities: usize, seed: u64) -> Self {
        CorpusSpec {
            identities,
            poses: PoseRoster::default(),
            lights: LightRoster::default(),
            height: 67,
            width: 67,
            channels: 3,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.identities * self.poses.len() * self.lights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::config(format!(
                "corpus images need 1 or 3 channels, not {}",
                self.channels
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("corpus image extents must be positive"));
        }
        Ok(())
    }

    /// Every `(identity, pose, light)` triple in identity-major order.
    fn triples(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.len());
        for i in 0..self.identities {
            for p in 0..self.poses.len() {
                for l in 0..self.lights.len() {
                    out.push((i, p, l));
                }
            }
        }
        out
    }

    pub fn render_sample(&self, template: &IdentityTemplate, pose: usize, light: usize) -> LabeledSample {
        LabeledSample {
            image: render(
                template,
                &self.poses.0[pose],
                &self.lights.0[light],
                self.height,
                self.width,
            ),
            identity: template.identity,
            pose,
            light,
        }
    }

    /// Renders the corpus in memory (no quantization).
    pub fn render_all(&self) -> Result<Vec<LabeledSample>> {
        self.validate()?;
        let templates: Vec<_> = (0..self.identities)
            .map(|i| IdentityTemplate::new(self.seed, i, self.channels))
            .collect();
        Ok(self
            .triples()
            .into_par_iter()
            .map(|(i, p, l)| self.render_sample(&templates[i], p, l))
            .collect())
    }
}

pub fn sample_file_name(identity: usize, pose: usize, light: usize, channels: usize) -> String {
    let ext = if channels == 1 { "pgm" } else { "ppm" };
    format!("id{identity}_p{pose}_l{light}.{ext}")
}

/// Parses `id{I}_p{P}_l{L}.(pgm|ppm)`.
pub fn parse_file_name(name: &str) -> Option<(usize, usize, usize)> {
    let stem = name
        .strip_suffix(".pgm")
        .or_else(|| name.strip_suffix(".ppm"))?;
    let rest = stem.strip_prefix("id")?;
    let (i, rest) = rest.split_once("_p")?;
    let (p, l) = rest.split_once("_l")?;
    let num = |s: &str| -> Option<usize> {
        if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
            None
        } else {
            s.parse().ok()
        }
    };
    Some((num(i)?, num(p)?, num(l)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub filename: String,
    pub identity: usize,
    pub pose: usize,
    pub light: usize,
    pub yaw_deg: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl fmt::Display for Manifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{MANIFEST_HEADER}")?;
        for r in &self.rows {
            writeln!(
                f,
                "{},{},{},{},{}",
                r.filename, r.identity, r.pose, r.light, r.yaw_deg
            )?;
        }
        Ok(())
    }
}

impl FromStr for Manifest {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut lines = s.lines();
        if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
            return Err(Error::Format("manifest header missing".into()));
        }
        let rows = lines
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                let bad = || Error::Format(format!("bad manifest row {line:?}"));
                if f.len() != 5 {
                    return Err(bad());
                }
                Ok(ManifestRow {
                    filename: f[0].to_string(),
                    identity: f[1].parse().map_err(|_| bad())?,
                    pose: f[2].parse().map_err(|_| bad())?,
                    light: f[3].parse().map_err(|_| bad())?,
                    yaw_deg: f[4].parse().map_err(|_| bad())?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Manifest { rows })
    }
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        fs::read_to_string(dir.join(MANIFEST_FILE))?.parse()
    }

    pub fn per_identity_counts(&self) -> Vec<usize> {
        let n = self.rows.iter().map(|r| r.identity + 1).max().unwrap_or(0);
        let mut counts = vec![0; n];
        for r in &self.rows {
            counts[r.identity] += 1;
        }
        counts
    }

    /// Yaw per pose id as recorded in the manifest.
    pub fn pose_roster(&self) -> PoseRoster {
        let n = self.rows.iter().map(|r| r.pose + 1).max().unwrap_or(0);
        let mut yaws = vec![f64::NAN; n];
        for r in &self.rows {
            yaws[r.pose] = r.yaw_deg;
        }
        PoseRoster(
            yaws.into_iter()
                .map(|yaw_deg| super::synth::PoseSpec { yaw_deg })
                .collect(),
        )
    }
}

/// Writes one image per `(identity, pose, light)` plus `manifest.csv`.
/// Output bytes depend only on the spec, so reruns are byte-identical.
pub fn generate_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    let templates: Vec<_> = (0..spec.identities)
        .map(|i| IdentityTemplate::new(spec.seed, i, spec.channels))
        .collect();
    let rows = spec
        .triples()
        .into_par_iter()
        .map(|(i, p, l)| {
            let sample = spec.render_sample(&templates[i], p, l);
            let filename = sample_file_name(i, p, l, spec.channels);
            write_pnm(&out_dir.join(&filename), &sample.image)?;
            Ok(ManifestRow {
                filename,
                identity: i,
                pose: p,
                light: l,
                yaw_deg: spec.poses.0[p].yaw_deg,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest { rows };
    fs::write(out_dir.join(MANIFEST_FILE), manifest.to_string())?;
    Ok(manifest)
}

/// Loads every `.pgm`/`.ppm` in `dir`, ordered by file name. Labels come from
/// the file names; any image file that does not follow the convention makes
/// the whole load fail, listing all offenders.
pub fn load_corpus(dir: &Path) -> Result<Vec<LabeledSample>> {
    let mut files: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let is_image = matches!(
            path.extension().and_then(|e| e.to_str()),
            Some("pgm") | Some("ppm")
        );
        if is_image {
            let name = path
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string();
            files.push((name, path));
        }
    }
    files.sort();
    let bad: Vec<PathBuf> = files
        .iter()
        .filter(|(name, _)| parse_file_name(name).is_none())
        .map(|(_, p)| p.clone())
        .collect();
    if !bad.is_empty() {
        return Err(Error::Naming(bad));
    }
    files
        .par_iter()
        .map(|(name, path)| {
            let (identity, pose, light) = parse_file_name(name).expect("checked above");
            Ok(LabeledSample {
                image: read_pnm(path)?,
                identity,
                pose,
                light,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum SplitProtocol {
    /// Shuffle with the seed, put `round(fraction * n)` samples in train.
    Random { fraction: f64, seed: u64 },
    /// Every sample lit by one of these light ids goes to test.
    HoldoutLight(Vec<usize>),
    /// Every sample in one of these pose bins goes to test.
    HoldoutPose(Vec<usize>),
}

impl SplitProtocol {
    /// Default held-out lights: ids 2 and 6 (vertical ramps under the
    /// default roster), whose neighbours stay in training.
    pub fn default_holdout_light() -> Self {
        SplitProtocol::HoldoutLight(vec![2, 6])
    }

    /// Default held-out poses: the two full-profile bins of the default roster.
    pub fn default_holdout_pose() -> Self {
        SplitProtocol::HoldoutPose(PoseRoster::default().beyond(90.0))
    }
}

impl fmt::Display for SplitProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids = |v: &[usize]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
        match self {
            SplitProtocol::Random { fraction, seed } => write!(f, "random({fraction},{seed})"),
            SplitProtocol::HoldoutLight(v) => write!(f, "holdout-light({})", ids(v)),
            SplitProtocol::HoldoutPose(v) => write!(f, "holdout-pose({})", ids(v)),
        }
    }
}

impl FromStr for SplitProtocol {
    type Err = Error;

    /// Accepts `random`, `random(0.9)`, `random(0.9,7)`, `holdout-light`,
    /// `holdout-light(2,6)`, `holdout-pose`, `holdout-pose(0,12)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, args) = match s.split_once('(') {
            Some((n, rest)) => {
                let inner = rest
                    .strip_suffix(')')
                    .ok_or_else(|| Error::config(format!("unbalanced parentheses in {s:?}")))?;
                (n, Some(inner))
            }
            None => (s, None),
        };
        let list = |a: &str| -> Result<Vec<usize>> {
            a.split(',')
                .filter(|x| !x.trim().is_empty())
                .map(|x| {
                    x.trim()
                        .parse()
                        .map_err(|_| Error::config(format!("bad id {x:?} in {s:?}")))
                })
                .collect()
        };
        match (name, args) {
            ("random", None) => Ok(SplitProtocol::Random {
                fraction: 0.9,
                seed: 0,
            }),
            ("random", Some(a)) => {
                let parts: Vec<&str> = a.split(',').map(str::trim).collect();
                let fraction: f64 = parts[0]
                    .parse()
                    .map_err(|_| Error::config(format!("bad fraction in {s:?}")))?;
                if !(0.0..=1.0).contains(&fraction) {
                    return Err(Error::config(format!("fraction {fraction} outside [0, 1]")));
                }
                let seed = match parts.get(1) {
                    Some(x) => x
                        .parse()
                        .map_err(|_| Error::config(format!("bad seed in {s:?}")))?,
                    None => 0,
                };
                Ok(SplitProtocol::Random { fraction, seed })
            }
            ("holdout-light", None) => Ok(Self::default_holdout_light()),
            ("holdout-light", Some(a)) => Ok(SplitProtocol::HoldoutLight(list(a)?)),
            ("holdout-pose", None) => Ok(Self::default_holdout_pose()),
            ("holdout-pose", Some(a)) => Ok(SplitProtocol::HoldoutPose(list(a)?)),
            _ => Err(Error::Unknown {
                kind: "split protocol",
                name: name.to_string(),
            }),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Split {
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub warnings: Vec<String>,
}

/// Partitions `samples` into disjoint train and test sets. Both keep the
/// input order.
pub fn split(samples: Vec<LabeledSample>, protocol: &SplitProtocol) -> Result<Split> {
    if samples.is_empty() {
        return Err(Error::Empty("cannot split an empty sample list".into()));
    }
    let n = samples.len();
    let in_test: Vec<bool> = match protocol {
        SplitProtocol::Random { fraction, seed } => {
            let n_train = (fraction * n as f64).round() as usize;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
            let mut flags = vec![true; n];
            for &i in &order[..n_train.min(n)] {
                flags[i] = false;
            }
            flags
        }
        SplitProtocol::HoldoutLight(ids) => samples.iter().map(|s| ids.contains(&s.light)).collect(),
        SplitProtocol::HoldoutPose(ids) => samples.iter().map(|s| ids.contains(&s.pose)).collect(),
    };
    let mut out = Split::default();
    for (s, t) in samples.into_iter().zip(in_test) {
        if t {
            out.test.push(s);
        } else {
            out.train.push(s);
        }
    }
    if out.test.is_empty() {
        out.warnings
            .push(format!("split {protocol} left the test set empty"));
    }
    if out.train.is_empty() {
        out.warnings
            .push(format!("split {protocol} left the training set empty"));
    }
    for w in &out.warnings {
        log::warn!("{w}");
    }
    Ok(out)
}
