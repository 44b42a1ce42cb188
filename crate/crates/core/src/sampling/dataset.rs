use super::{adaptive_refinement_sample, uniform_in_limits, SamplerConfig, SamplingError};
use crate::field::{empirical_distance, empirical_gradient};
use crate::geometry::{Configuration, RobotModel, Scene};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

pub const DATASET_MAGIC: &[u8; 8] = b"QFLOWDAT";
pub const DATASET_VERSION: u32 = 1;

/// One supervised example: a query, its collision sample set and the
/// expectation targets over it. `y_g` is absent for colliding queries.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRecord {
    pub scene_index: usize,
    pub q: Configuration,
    pub samples: Vec<Configuration>,
    pub y_d: f64,
    pub y_g: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    robot: RobotModel,
    scenes: Vec<Scene>,
    sampler: SamplerConfig,
    queries_per_scene: usize,
    dropped: usize,
    free_scenes: Vec<String>,
    #[serde(default)]
    provenance: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub robot: RobotModel,
    pub scenes: Vec<Scene>,
    pub sampler: SamplerConfig,
    pub queries_per_scene: usize,
    pub records: Vec<TrainingRecord>,
    /// Queries whose sample set came back empty.
    pub dropped: usize,
    /// Scenes without obstacles; they contribute no records.
    pub free_scenes: Vec<String>,
    /// Free text from whoever wrote the file, kept verbatim.
    pub provenance: String,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one (scene, query) pair, independent of scheduling.
pub(crate) fn query_seed(seed: u64, scene: usize, query: usize) -> u64 {
    splitmix64(seed ^ splitmix64(((scene as u64) << 32) ^ query as u64))
}

/// Uniform queries over the joint box for every scene, each labelled with
/// its sample set and expectation targets.
pub fn build_dataset(
    model: &RobotModel,
    scenes: &[Scene],
    n_queries: usize,
    cfg: &SamplerConfig,
) -> Result<Dataset, SamplingError> {
    cfg.validate()?;
    if n_queries == 0 {
        return Err(SamplingError::InvalidConfig("n_queries must be at least 1".into()));
    }
    let free_scenes: Vec<String> = scenes
        .iter()
        .filter(|s| s.obstacles.is_empty())
        .map(|s| s.id.clone())
        .collect();
    let jobs: Vec<(usize, usize)> = scenes
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.obstacles.is_empty())
        .flat_map(|(si, _)| (0..n_queries).map(move |k| (si, k)))
        .collect();

    let results: Vec<Result<Option<TrainingRecord>, SamplingError>> = jobs
        .par_iter()
        .map(|&(si, k)| {
            let seed = query_seed(cfg.rng_seed, si, k);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = uniform_in_limits(model, &mut rng);
            let qcfg = SamplerConfig {
                rng_seed: splitmix64(seed),
                ..cfg.clone()
            };
            match adaptive_refinement_sample(model, &scenes[si], &q, &qcfg) {
                Ok(set) if set.samples.is_empty() => Ok(None),
                Ok(set) => {
                    let y_d = if set.d_min_est == 0.0 {
                        0.0
                    } else {
                        empirical_distance(&q, &set.samples).expect("non-empty")
                    };
                    let y_g = if set.d_min_est == 0.0 {
                        None
                    } else {
                        empirical_gradient(&q, &set.samples).ok()
                    };
                    Ok(Some(TrainingRecord {
                        scene_index: si,
                        q,
                        samples: set.samples,
                        y_d,
                        y_g,
                    }))
                }
                Err(SamplingError::AllSeedsFailed { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();

    let mut records = Vec::with_capacity(jobs.len());
    let mut dropped = 0;
    for r in results {
        match r? {
            Some(rec) => records.push(rec),
            None => dropped += 1,
        }
    }
    if 2 * dropped > jobs.len() {
        return Err(SamplingError::DatasetQuality {
            dropped,
            total: jobs.len(),
        });
    }
    Ok(Dataset {
        robot: model.clone(),
        scenes: scenes.to_vec(),
        sampler: cfg.clone(),
        queries_per_scene: n_queries,
        records,
        dropped,
        free_scenes,
        provenance: String::new(),
    })
}

fn put_f64s(buf: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SamplingError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| SamplingError::Format("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, SamplingError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, SamplingError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, SamplingError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, SamplingError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| SamplingError::Format("size".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl Dataset {
    pub fn scene_of(&self, record: &TrainingRecord) -> &Scene {
        &self.scenes[record.scene_index]
    }

    pub fn records_for_scene(&self, scene_index: usize) -> impl Iterator<Item = &TrainingRecord> {
        self.records.iter().filter(move |r| r.scene_index == scene_index)
    }

    fn header(&self) -> Header {
        Header {
            robot: self.robot.clone(),
            scenes: self.scenes.clone(),
            sampler: self.sampler.clone(),
            queries_per_scene: self.queries_per_scene,
            dropped: self.dropped,
            free_scenes: self.free_scenes.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Magic, version, TOML header, records, CRC32 of everything before it.
    pub fn to_bytes(&self) -> Result<Vec<u8>, SamplingError> {
        let header = toml::to_string(&self.header()).map_err(|e| SamplingError::Format(e.to_string()))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(header.as_bytes());
        buf.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            buf.extend_from_slice(&(r.scene_index as u32).to_le_bytes());
            put_f64s(&mut buf, &r.q);
            buf.extend_from_slice(&r.y_d.to_le_bytes());
            match &r.y_g {
                Some(g) => {
                    buf.push(1);
                    put_f64s(&mut buf, g);
                }
                None => buf.push(0),
            }
            buf.extend_from_slice(&(r.samples.len() as u32).to_le_bytes());
            for s in &r.samples {
                put_f64s(&mut buf, s);
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SamplingError> {
        if bytes.len() < 12 + 4 || &bytes[..8] != DATASET_MAGIC {
            return Err(SamplingError::Format("not a dataset file".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(SamplingError::Format("checksum mismatch".into()));
        }
        let mut c = Cursor { buf: body, pos: 8 };
        let version = c.u32()?;
        if version != DATASET_VERSION {
            return Err(SamplingError::Format(format!("unsupported version {version}")));
        }
        let hlen = c.u32()? as usize;
        let htext = std::str::from_utf8(c.take(hlen)?).map_err(|e| SamplingError::Format(e.to_string()))?;
        let header: Header = toml::from_str(htext).map_err(|e| SamplingError::Format(e.to_string()))?;
        let dof = header.robot.dof();
        let n = c.u64()? as usize;
        let mut records = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let scene_index = c.u32()? as usize;
            if scene_index >= header.scenes.len() {
                return Err(SamplingError::Format("scene index out of range".into()));
            }
            let q = c.f64s(dof)?;
            let y_d = f64::from_le_bytes(c.take(8)?.try_into().unwrap());
            let y_g = match c.u8()? {
                0 => None,
                1 => Some(c.f64s(dof)?),
                _ => return Err(SamplingError::Format("bad gradient flag".into())),
            };
            let ns = c.u32()? as usize;
            let samples = (0..ns).map(|_| c.f64s(dof)).collect::<Result<_, _>>()?;
            records.push(TrainingRecord {
                scene_index,
                q,
                samples,
                y_d,
                y_g,
            });
        }
        if c.pos != body.len() {
            return Err(SamplingError::Format("trailing bytes".into()));
        }
        Ok(Dataset {
            robot: header.robot,
            scenes: header.scenes,
            sampler: header.sampler,
            queries_per_scene: header.queries_per_scene,
            records,
            dropped: header.dropped,
            free_scenes: header.free_scenes,
            provenance: header.provenance,
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), SamplingError> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, SamplingError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// Tab-separated dump, one row per record.
    pub fn export_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let dof = self.robot.dof();
        writeln!(w, "# robot links {:?}", self.robot.link_lengths())?;
        writeln!(w, "# records {} dropped {}", self.records.len(), self.dropped)?;
        let mut cols = vec!["scene".to_string()];
        cols.extend((0..dof).map(|k| format!("q{k}")));
        cols.push("y_d".into());
        cols.extend((0..dof).map(|k| format!("y_g{k}")));
        cols.push("n_samples".into());
        cols.push("samples".into());
        writeln!(w, "{}", cols.join("\t"))?;
        for r in &self.records {
            let mut row = vec![self.scenes[r.scene_index].id.clone()];
            row.extend(r.q.iter().map(|v| format!("{v}")));
            row.push(format!("{}", r.y_d));
            match &r.y_g {
                Some(g) => row.extend(g.iter().map(|v| format!("{v}"))),
                None => row.extend((0..dof).map(|_| "nan".to_string())),
            }
            row.push(r.samples.len().to_string());
            let s: Vec<String> = r
                .samples
                .iter()
                .map(|s| s.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(","))
                .collect();
            row.push(s.join(";"));
            writeln!(w, "{}", row.join("\t"))?;
        }
        Ok(())
    }
}
