use serde::Serialize;

use crate::abft::FlagRow;
use crate::error::Result;
use crate::inject::FaultEvent;
use crate::model::Params;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rq1Row {
    pub step: u64,
    pub microstep: u64,
    pub site: String,
    pub freq: f64,
    pub sev: f64,
    pub zero_ref_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rq1LayerRow {
    pub step: u64,
    pub microstep: u64,
    pub site: String,
    pub layer: usize,
    pub mismatches: u64,
    pub freq: f64,
    pub sev: f64,
    pub zero_ref_count: u64,
}

/// `ratio` is infinite on degenerate rows (zero true gradient, non-zero
/// difference); those rows do not feed `wcnts`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rq2Row {
    pub step: u64,
    pub diff_l2: f64,
    pub truth_l2: f64,
    pub ratio: f64,
    pub wcnts: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rq3Row {
    pub step: u64,
    pub param_diff_l2: f64,
    pub loss_healthy: f64,
    pub loss_unhealthy: f64,
    pub gnorm_healthy: f64,
    pub gnorm_unhealthy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShadowRow {
    pub step: u64,
    pub alarm: bool,
    pub first_diff_tensor: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventRow {
    pub step: u64,
    pub microstep: u64,
    pub site: String,
    pub layer: usize,
    pub rank: usize,
    pub index: usize,
    pub factor: f64,
}

impl From<&FaultEvent> for EventRow {
    fn from(e: &FaultEvent) -> Self {
        EventRow {
            step: e.step,
            microstep: e.microstep,
            site: e.site_label(),
            layer: e.layer,
            rank: e.rank,
            index: e.index,
            factor: e.factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationRow {
    pub microsteps: u64,
    pub elements: u64,
    pub mismatches: u64,
    pub measured_rate: f64,
    pub expected_rate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub within_ci: bool,
}

/// Receives protocol output as it is produced. Every method defaults to a no-op.
pub trait Sink {
    fn rq1(&mut self, _row: &Rq1Row) -> Result<()> {
        Ok(())
    }
    fn rq1_layer(&mut self, _row: &Rq1LayerRow) -> Result<()> {
        Ok(())
    }
    fn rq2(&mut self, _row: &Rq2Row) -> Result<()> {
        Ok(())
    }
    fn rq3(&mut self, _row: &Rq3Row) -> Result<()> {
        Ok(())
    }
    fn shadow(&mut self, _row: &ShadowRow) -> Result<()> {
        Ok(())
    }
    fn abft(&mut self, _row: &FlagRow) -> Result<()> {
        Ok(())
    }
    fn calibration(&mut self, _row: &CalibrationRow) -> Result<()> {
        Ok(())
    }
    fn events(&mut self, _events: &[FaultEvent]) -> Result<()> {
        Ok(())
    }
    /// Parameters after `step` updates; `unhealthy` is `None` for single-node protocols.
    fn checkpoint(
        &mut self,
        _step: u64,
        _healthy: &Params,
        _unhealthy: Option<&Params>,
    ) -> Result<()> {
        Ok(())
    }
}

/// Keeps everything in memory (tests and library use).
#[derive(Debug, Default, Clone)]
pub struct MemorySink {
    pub rq1: Vec<Rq1Row>,
    pub rq1_layers: Vec<Rq1LayerRow>,
    pub rq2: Vec<Rq2Row>,
    pub rq3: Vec<Rq3Row>,
    pub shadow: Vec<ShadowRow>,
    pub abft: Vec<FlagRow>,
    pub calibration: Vec<CalibrationRow>,
    pub events: Vec<FaultEvent>,
    pub checkpoints: Vec<(u64, Params, Option<Params>)>,
}

impl Sink for MemorySink {
    fn rq1(&mut self, row: &Rq1Row) -> Result<()> {
        self.rq1.push(row.clone());
        Ok(())
    }
    fn rq1_layer(&mut self, row: &Rq1LayerRow) -> Result<()> {
        self.rq1_layers.push(row.clone());
        Ok(())
    }
    fn rq2(&mut self, row: &Rq2Row) -> Result<()> {
        self.rq2.push(row.clone());
        Ok(())
    }
    fn rq3(&mut self, row: &Rq3Row) -> Result<()> {
        self.rq3.push(row.clone());
        Ok(())
    }
    fn shadow(&mut self, row: &ShadowRow) -> Result<()> {
        self.shadow.push(row.clone());
        Ok(())
    }
    fn abft(&mut self, row: &FlagRow) -> Result<()> {
        self.abft.push(row.clone());
        Ok(())
    }
    fn calibration(&mut self, row: &CalibrationRow) -> Result<()> {
        self.calibration.push(row.clone());
        Ok(())
    }
    fn events(&mut self, events: &[FaultEvent]) -> Result<()> {
        self.events.extend_from_slice(events);
        Ok(())
    }
    fn checkpoint(
        &mut self,
        step: u64,
        healthy: &Params,
        unhealthy: Option<&Params>,
    ) -> Result<()> {
        self.checkpoints
            .push((step, healthy.clone(), unhealthy.cloned()));
        Ok(())
    }
}
