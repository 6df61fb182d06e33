//! Parameter scans: one control program, one set of step tables per point.

use crate::codegen::{generate, BoardProgram};
use crate::decimal::Decimal;
use crate::pipeline::{compile, CompileError, CompileOptions, Compiled, Stage};
use crate::program::SeqProgram;
use crate::steptable::{build_step_tables, StepTables};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScanError {
    #[error("program has no scan")]
    NoScan,
    #[error("scan point {index} ({point}): {source}")]
    Point {
        index: usize,
        point: Decimal,
        source: CompileError,
    },
    #[error("scan point {index} changes the control program of board {board}")]
    ControlChanged { index: usize, board: String },
}

#[derive(Debug, Clone)]
pub struct ScanExpansion {
    /// The program compiled at the first point.
    pub base: Compiled,
    pub points: Vec<Decimal>,
    /// Step tables per point, in point order.
    pub tables: Vec<StepTables>,
}

impl ScanExpansion {
    pub fn control(&self) -> &[BoardProgram] {
        &self.base.boards
    }
}

/// Compiles the control program once and rebuilds only the step tables for
/// every scan point. Regenerating code against each point's tables must give
/// the same words, otherwise the expansion fails.
pub fn expand_scan(p: &SeqProgram, opts: &CompileOptions) -> Result<ScanExpansion, ScanError> {
    let scan = p.scan.as_ref().ok_or(ScanError::NoScan)?;
    let point_err = |index: usize, point: &Decimal, stage: Stage, e: String| ScanError::Point {
        index,
        point: point.clone(),
        source: CompileError {
            stage,
            message: e,
            loc: None,
        },
    };
    let mut base: Option<Compiled> = None;
    let mut tables = Vec::with_capacity(scan.points.len());
    for (index, point) in scan.points.iter().enumerate() {
        let variant = p
            .with_scan_point(point)
            .map_err(|e| point_err(index, point, Stage::Validate, e.to_string()))?;
        let Some(b) = &base else {
            let c = compile(&variant, opts).map_err(|source| ScanError::Point {
                index,
                point: point.clone(),
                source,
            })?;
            tables.push(c.tables.clone());
            base = Some(c);
            continue;
        };
        let t = build_step_tables(&variant, opts.sysclk_hz).map_err(|e| point_err(index, point, Stage::StepTable, e.to_string()))?;
        let control = generate(&b.alloc, &t, &variant.config).map_err(|e| point_err(index, point, Stage::Codegen, e.to_string()))?;
        for (got, want) in control.iter().zip(&b.boards) {
            if got.words != want.words || got.data != want.data {
                return Err(ScanError::ControlChanged {
                    index,
                    board: got.board_id.clone(),
                });
            }
        }
        tables.push(t);
    }
    Ok(ScanExpansion {
        base: base.expect("scan has at least one point"),
        points: scan.points.clone(),
        tables,
    })
}
