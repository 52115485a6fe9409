//! Single-file checkpoint container.
//!
//! Layout: magic `SPCKPT\0\0`, `u32` format version, `u32` header length,
//! a JSON header (configuration, statistics, tensor index), then the raw
//! little-endian payload of every tensor in index order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Result, SpaceError};
use crate::losses::CriterionState;
use crate::networks::{Networks, ParamSet, TeacherStats};
use crate::scoring::{CalibrationStats, Model};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SPCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

const GROUPS: [&str; 5] = ["teacher", "student", "student_ema", "encoder", "fm"];

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub criterion: CriterionState,
    pub iteration: u64,
    pub run: RunConfig,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct CriterionHeader {
    alpha: f64,
    initialized: bool,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    run: RunConfig,
    iteration: u64,
    ema_for_logical: bool,
    teacher_stats: TeacherStats,
    calibration: Option<CalibrationStats>,
    criterion: CriterionHeader,
    tensors: Vec<TensorEntry>,
}

fn param_groups(nets: &Networks) -> [(&'static str, &ParamSet); 5] {
    [
        (GROUPS[0], &nets.teacher),
        (GROUPS[1], &nets.student),
        (GROUPS[2], &nets.student_ema),
        (GROUPS[3], &nets.encoder),
        (GROUPS[4], &nets.fm),
    ]
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut index = Vec::new();
    for (group, params) in param_groups(&ck.model.nets) {
        for (name, t) in params.iter() {
            index.push(TensorEntry {
                name: format!("{group}.{name}"),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    if ck.criterion.initialized {
        index.push(TensorEntry {
            name: "criterion.upsilon".into(),
            dtype: "f64".into(),
            shape: ck.criterion.shape.clone(),
            offset: payload.len() as u64,
        });
        for v in &ck.criterion.upsilon {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        run: ck.run.clone(),
        iteration: ck.iteration,
        ema_for_logical: ck.model.ema_for_logical,
        teacher_stats: ck.model.teacher_stats.clone(),
        calibration: ck.model.calibration,
        criterion: CriterionHeader {
            alpha: ck.criterion.alpha,
            initialized: ck.criterion.initialized,
            shape: ck.criterion.shape.clone(),
        },
        tensors: index,
    };
    let header = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |reason: String| SpaceError::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let header_bytes = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| bad(format!("bad header: {e}")))?;
    let payload = &bytes[16 + hlen..];

    let mut groups: [ParamSet; 5] = Default::default();
    let mut criterion = CriterionState::new(header.criterion.alpha);
    for entry in &header.tensors {
        let numel: usize = entry.shape.iter().product();
        let width = match entry.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(bad(format!("unknown dtype '{other}' for {}", entry.name))),
        };
        let start = entry.offset as usize;
        let raw = payload
            .get(start..start + numel * width)
            .ok_or_else(|| bad(format!("payload too short for {}", entry.name)))?;
        if entry.name == "criterion.upsilon" {
            if width != 8 {
                return Err(bad("criterion must be stored as f64".into()));
            }
            criterion = CriterionState {
                shape: entry.shape.clone(),
                upsilon: raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                alpha: header.criterion.alpha,
                initialized: true,
            };
            continue;
        }
        if width != 4 {
            return Err(bad(format!("parameter {} must be f32", entry.name)));
        }
        let (group, name) = entry
            .name
            .split_once('.')
            .ok_or_else(|| bad(format!("unqualified tensor name {}", entry.name)))?;
        let gi = GROUPS
            .iter()
            .position(|g| *g == group)
            .ok_or_else(|| bad(format!("unknown parameter group '{group}'")))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        groups[gi].insert(name, Tensor::new(entry.shape.clone(), data)?);
    }
    if header.criterion.initialized && !criterion.initialized {
        return Err(bad("criterion tensor missing".into()));
    }
    let [teacher, student, student_ema, encoder, fm] = groups;
    let nets = Networks {
        config: header.run.network.clone(),
        teacher,
        student,
        student_ema,
        encoder,
        fm,
    };
    nets.check_layout()?;
    Ok(Checkpoint {
        model: Model {
            nets,
            teacher_stats: header.teacher_stats,
            ema_for_logical: header.ema_for_logical,
            calibration: header.calibration,
        },
        criterion,
        iteration: header.iteration,
        run: header.run,
    })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode(ck)).map_err(|e| SpaceError::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            SpaceError::config(format!("checkpoint not found: {}", path.display()))
        } else {
            SpaceError::io(path, e)
        }
    })?;
    decode(&bytes, path)
}

/// Teacher weights from an existing checkpoint, checked against `run`'s layout.
pub fn load_teacher(path: &Path, run: &RunConfig) -> Result<(ParamSet, TeacherStats)> {
    let ck = load(path)?;
    let fresh = Networks::init(run.network.clone(), 0, 0)?;
    ck.model.nets.teacher.check_layout(&fresh.teacher, "teacher")?;
    Ok((ck.model.nets.teacher, ck.model.teacher_stats))
}
