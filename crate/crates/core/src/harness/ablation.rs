use std::fmt;
use std::io::Write;

use log::info;

use crate::error::Result;
use crate::harness::dataset::Dataset;
use crate::harness::train::evaluate_top1;
use crate::reconstruct::{run_mgrq, Components, LossLog, ReconstructionConfig};
use crate::vit::ViTModel;

/// One reconstruction variant of the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arm {
    pub name: &'static str,
    pub components: Components,
}

const fn arm(name: &'static str, obwr: bool, ebgs: bool, ibls: bool) -> Arm {
    Arm {
        name,
        components: Components { obwr, ebgs, ibls },
    }
}

pub const ARMS: [Arm; 6] = [
    arm("baseline", false, false, false),
    arm("obwr", true, false, false),
    arm("ebgs", false, true, false),
    arm("ibls", false, false, true),
    arm("obwr+ebgs", true, true, false),
    arm("mgrq", true, true, true),
];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub arm: String,
    /// `None` for the full-precision reference.
    pub components: Option<Components>,
    pub bits_w: u8,
    pub bits_a: u8,
    pub top1: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Reconstruction loss log of each arm, in row order (empty for the
    /// reference row and the baseline).
    pub logs: Vec<LossLog>,
}

impl AblationReport {
    pub const HEADER: &'static str = "arm,obwr,ebgs,ibls,bits_w,bits_a,top1";

    pub fn row(&self, arm: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.arm == arm)
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{}", Self::HEADER)?;
        for r in &self.rows {
            let flag = |f: fn(&Components) -> bool| match &r.components {
                Some(c) => (if f(c) { "1" } else { "0" }).to_string(),
                None => "-".to_string(),
            };
            writeln!(
                w,
                "{},{},{},{},{},{},{:.4}",
                r.arm,
                flag(|c| c.obwr),
                flag(|c| c.ebgs),
                flag(|c| c.ibls),
                r.bits_w,
                r.bits_a,
                r.top1
            )?;
        }
        Ok(())
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>4} {:>4} {:>4}  {:>5}  {:>7}", "arm", "OBWR", "EBGS", "IBLS", "W/A", "top-1")?;
        for r in &self.rows {
            let mark = |on: Option<bool>| match on {
                Some(true) => "x",
                Some(false) => ".",
                None => "-",
            };
            let c = r.components;
            writeln!(
                f,
                "{:<16} {:>4} {:>4} {:>4}  {:>5}  {:>6.2}%",
                r.arm,
                mark(c.map(|c| c.obwr)),
                mark(c.map(|c| c.ebgs)),
                mark(c.map(|c| c.ibls)),
                format!("{}/{}", r.bits_w, r.bits_a),
                100.0 * r.top1
            )?;
        }
        Ok(())
    }
}

/// Runs every arm from the same full-precision model and calibration set.
/// Arm `i` uses seed `config.seed + i`; nothing is shared between arms.
pub fn run_ablation(
    fp: &ViTModel,
    calibration: &Dataset,
    test: &Dataset,
    config: &ReconstructionConfig,
) -> Result<AblationReport> {
    let images = calibration.all()?;
    let bits = config.quantize.bits;
    let mut report = AblationReport {
        rows: vec![AblationRow {
            arm: "full-precision".into(),
            components: None,
            bits_w: 32,
            bits_a: 32,
            top1: evaluate_top1(fp, test)?,
        }],
        logs: vec![LossLog::default()],
    };
    for (i, arm) in ARMS.iter().enumerate() {
        let arm_config = ReconstructionConfig {
            seed: config.seed.wrapping_add(i as u64),
            components: arm.components,
            ..config.clone()
        };
        let out = run_mgrq(fp, &images, &arm_config)?;
        let top1 = evaluate_top1(&out.model, test)?;
        info!("arm {}: top-1 {:.2}%", arm.name, 100.0 * top1);
        report.rows.push(AblationRow {
            arm: arm.name.into(),
            components: Some(arm.components),
            bits_w: bits.block_weight,
            bits_a: bits.block_act,
            top1,
        });
        report.logs.push(out.log);
    }
    Ok(report)
}
