//! On-disk compile bundles: binaries, step tables, stage dumps and a
//! manifest of content hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ionctl::codegen::BoardProgram;
use ionctl::pipeline::{CompileOptions, Compiled, Metrics};
use ionctl::program::BoardKind;
use ionctl::regalloc::Location;
use ionctl::sim::SimBoard;
use ionctl::steptable::{BoardTable, StepTables};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FORMAT: u32 = 1;

/// Stage dumps `--emit` can ask for.
pub const STAGES: [&str; 7] = ["tree", "cfg", "ssa", "liveness", "igraph", "alloc", "asm"];

pub fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub kind: String,
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanInfo {
    pub state: String,
    pub field: String,
    pub points: Vec<String>,
    /// Directory of each point's step tables, relative to the bundle.
    pub table_dirs: Vec<String>,
    pub control_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub input: String,
    pub input_sha256: String,
    pub regs: u8,
    pub sysclk_hz: u64,
    pub split_critical_edges: bool,
    pub timings: Vec<StageTime>,
    pub total_ms: f64,
    pub metrics: serde_json::Value,
    pub warnings: Vec<String>,
    pub artifacts: Vec<Artifact>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan: Option<ScanInfo>,
}

/// What the simulator needs beyond the raw words and tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoardImage {
    pub board_id: String,
    pub kind: BoardKind,
    pub counter_board: bool,
    pub regs: u8,
    pub binary: String,
    pub table: String,
    pub data: Vec<i32>,
    pub feedback_pcs: Vec<usize>,
    pub exit_map: BTreeMap<String, Location>,
}

pub struct Writer {
    dir: PathBuf,
    artifacts: Vec<Artifact>,
}

impl Writer {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Writer {
            dir: dir.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    pub fn put(&mut self, kind: &str, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.artifacts.push(Artifact {
            kind: kind.into(),
            path: rel.into(),
            sha256: sha256(bytes),
            bytes: bytes.len(),
        });
        Ok(())
    }

    pub fn finish(self, mut manifest: Manifest) -> Result<Manifest> {
        manifest.artifacts = self.artifacts;
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(self.dir.join("manifest.json"), text)?;
        Ok(manifest)
    }
}

pub fn stage_dump(c: &Compiled, stage: &str) -> (String, String) {
    use ionctl::{cfg, liveness, ssa};
    match stage {
        "tree" => ("tree.json".into(), c.program.to_json() + "\n"),
        "cfg" => ("cfg.dot".into(), cfg::to_dot(&c.cfg)),
        "ssa" => (
            "ssa.txt".into(),
            format!("{}\n; dominators\n{}", ssa::ssa_listing(&c.ssa), ssa::dominance_report(&c.ssa)),
        ),
        "liveness" => ("liveness.txt".into(), format!("{}\n{}", c.lowered, liveness::liveness_report(&c.lowered, &c.liveness))),
        "igraph" => ("igraph.dot".into(), c.alloc.graph.to_dot()),
        "alloc" => ("alloc.txt".into(), format!("{}\n{}", c.alloc.report(), c.alloc.cfg)),
        "asm" => {
            let mut s = String::new();
            for b in &c.boards {
                s.push_str(&format!("; board {}\n{}\n", b.board_id, b.asm_text()));
            }
            ("asm.s".into(), s)
        }
        other => unreachable!("unknown stage {other}"),
    }
}

pub fn board_images(boards: &[BoardProgram], table_dir: &str) -> Vec<BoardImage> {
    boards
        .iter()
        .map(|b| BoardImage {
            board_id: b.board_id.clone(),
            kind: b.kind,
            counter_board: b.counter_board,
            regs: b.regs,
            binary: format!("{}.bin", b.board_id),
            table: join(table_dir, &format!("{}.stbl", b.board_id)),
            data: b.data.clone(),
            feedback_pcs: b.feedback_pcs(),
            exit_map: b.exit_map.clone(),
        })
        .collect()
}

fn join(dir: &str, file: &str) -> String {
    if dir.is_empty() {
        file.to_string()
    } else {
        format!("{dir}/{file}")
    }
}

pub fn write_control(w: &mut Writer, boards: &[BoardProgram]) -> Result<()> {
    for b in boards {
        w.put("binary", &format!("{}.bin", b.board_id), &b.word_bytes())?;
    }
    Ok(())
}

pub fn write_tables(w: &mut Writer, tables: &StepTables, dir: &str) -> Result<()> {
    for t in &tables.boards {
        w.put("steptable", &join(dir, &format!("{}.stbl", t.board_id)), &t.to_bytes())?;
    }
    Ok(())
}

pub fn write_images(w: &mut Writer, boards: &[BoardProgram]) -> Result<()> {
    let images = board_images(boards, "");
    w.put("boards", "boards.json", (serde_json::to_string_pretty(&images)? + "\n").as_bytes())
}

pub fn manifest(input: &Path, source: &[u8], opts: &CompileOptions, c: &Compiled, metrics: &Metrics) -> Result<Manifest> {
    Ok(Manifest {
        format: FORMAT,
        input: input.display().to_string(),
        input_sha256: sha256(source),
        regs: opts.regs.total,
        sysclk_hz: opts.sysclk_hz,
        split_critical_edges: opts.split_critical_edges,
        timings: c
            .timings
            .iter()
            .map(|(s, d)| StageTime {
                stage: s.to_string(),
                ms: d.as_secs_f64() * 1e3,
            })
            .collect(),
        total_ms: c.total_time().as_secs_f64() * 1e3,
        metrics: serde_json::to_value(metrics)?,
        warnings: c.warnings.iter().map(|d| d.message.clone()).collect(),
        artifacts: Vec::new(),
        scan: None,
    })
}

/// A bundle read back from disk, hashes checked.
pub struct Loaded {
    pub manifest: Manifest,
    pub images: Vec<BoardImage>,
    dir: PathBuf,
}

pub fn load(dir: &Path) -> Result<Loaded> {
    let text = fs::read_to_string(dir.join("manifest.json")).with_context(|| format!("{} is not a bundle", dir.display()))?;
    let manifest: Manifest = serde_json::from_str(&text).context("manifest.json")?;
    if manifest.format != FORMAT {
        bail!("bundle format {} is not supported", manifest.format);
    }
    for a in &manifest.artifacts {
        let bytes = fs::read(dir.join(&a.path)).with_context(|| format!("reading {}", a.path))?;
        if sha256(&bytes) != a.sha256 {
            bail!("{} does not match its manifest hash", a.path);
        }
    }
    let images: Vec<BoardImage> = serde_json::from_slice(&fs::read(dir.join("boards.json")).context("boards.json")?).context("boards.json")?;
    Ok(Loaded {
        manifest,
        images,
        dir: dir.to_path_buf(),
    })
}

impl Loaded {
    /// Boards with the tables found in `table_dir` (relative to the bundle).
    pub fn sim_boards(&self, table_dir: &str) -> Result<Vec<SimBoard>> {
        self.images
            .iter()
            .map(|img| {
                let bin = fs::read(self.dir.join(&img.binary)).with_context(|| img.binary.clone())?;
                if bin.len() % 4 != 0 {
                    bail!("{} is not a whole number of words", img.binary);
                }
                let words: Vec<u32> = bin.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
                let table_path = join(table_dir, &format!("{}.stbl", img.board_id));
                let raw = fs::read(self.dir.join(&table_path)).with_context(|| table_path.clone())?;
                let (kind, _, entries) = BoardTable::from_bytes(&raw).map_err(|e| anyhow!("{table_path}: {e}"))?;
                if kind != img.kind {
                    bail!("{table_path}: table kind does not match board {}", img.board_id);
                }
                let mut feedback = vec![false; words.len()];
                for &pc in &img.feedback_pcs {
                    if pc < feedback.len() {
                        feedback[pc] = true;
                    }
                }
                Ok(SimBoard {
                    board_id: img.board_id.clone(),
                    counter_board: img.counter_board,
                    words,
                    feedback,
                    data: img.data.clone(),
                    regs: img.regs,
                    exit_map: img.exit_map.clone(),
                    durations: entries.iter().map(|e| e.duration_ticks()).collect(),
                })
            })
            .collect()
    }
}
