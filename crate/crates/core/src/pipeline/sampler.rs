use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::assets::container::{self, Entry};
use crate::attention::AttnRecord;
use crate::error::{Error, Result};
use crate::guidance::{guided_update, in_guidance_window, LossBreakdown, TraceRow};
use crate::reinit::{initial_noise, reinitialize, Reinitialization};
use crate::tensor::Tensor;

use super::{decode_preview, Pipeline, RunConfig};

/// Loss and in-box attention mass around one guided timestep.
#[derive(Clone, Debug)]
pub struct GuidedStep {
    pub timestep: usize,
    pub initial: LossBreakdown,
    pub best: LossBreakdown,
    pub mass_initial: Vec<f64>,
    pub mass_best: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SampleRun {
    pub latent: Tensor,
    pub reinit: Option<Reinitialization>,
    pub guided: Vec<GuidedStep>,
    /// Maps of the last denoiser pass (t = 1).
    pub last_record: AttnRecord,
}

/// Fraction of each concept's attention that falls inside its mask,
/// `Σ(A⊙M)/ΣA`, with `A` averaged over the layers at the mask resolution.
pub fn in_box_mass(record: &AttnRecord, masks: &[Tensor]) -> Result<Vec<f64>> {
    masks
        .iter()
        .enumerate()
        .map(|(n, m)| {
            let (h, w) = m.dims2()?;
            let a = record.mean_cross_map(n, h, w).ok_or_else(|| {
                Error::Configuration(format!("no cross-attention map {n} at {h}x{w}"))
            })?;
            Ok(a.hadamard(m)?.sum() / a.sum())
        })
        .collect()
}

/// Runs the sampler from `T` down to 0. Trace rows are appended to `trace`
/// as they are produced, so a failed run still leaves its partial trace.
pub fn sample(
    pipeline: &Pipeline,
    seed: u64,
    reinit: bool,
    trace: &mut Vec<TraceRow>,
) -> Result<SampleRun> {
    let steps = pipeline.schedule.steps();
    let (mut z, reinit) = if reinit {
        let r = reinitialize(seed, pipeline)?;
        trace.extend(r.rows.iter().cloned());
        (r.latent.z.clone(), Some(r))
    } else {
        (initial_noise(seed, pipeline.latent_shape()), None)
    };
    let guide = !pipeline.layout.regions.is_empty();
    let masks = if guide {
        pipeline.loss_targets()?.masks
    } else {
        Vec::new()
    };
    let mut guided = Vec::new();
    let mut last_record = AttnRecord::default();
    for t in (1..=steps).rev() {
        if guide && in_guidance_window(t, steps, pipeline.guidance.guidance_fraction) {
            let update = guided_update(&z, t, steps, pipeline, &pipeline.guidance)?;
            trace.extend(update.rows.iter().cloned());
            guided.push(GuidedStep {
                timestep: t,
                mass_initial: in_box_mass(&update.initial.record, &masks)?,
                mass_best: in_box_mass(&update.best.record, &masks)?,
                initial: update.initial.breakdown,
                best: update.best.breakdown,
            });
            z = update.z;
        }
        let (eps, record) = pipeline.forward(&z, t)?;
        z = pipeline.schedule.ddim_step(&z, &eps, t)?;
        if !z.all_finite() {
            return Err(Error::Numeric(format!("non-finite latent after step {t}")));
        }
        last_record = record;
    }
    Ok(SampleRun {
        latent: z,
        reinit,
        guided,
        last_record,
    })
}

pub const TRACE_HEADER: &str = "timestep,iteration,l_ce,l_fill,l_region,total,phi_t,accepted";

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.timestep,
            r.iteration,
            r.l_ce,
            r.l_fill,
            r.l_region,
            r.total,
            r.phi_t,
            u8::from(r.accepted)
        );
    }
    out
}

fn attention_entries(record: &AttnRecord) -> Vec<Entry> {
    let mut out = Vec::new();
    for (l, layer) in record.layers.iter().enumerate() {
        for (id, m) in &layer.cross {
            out.push(Entry::new(
                format!("layer{l}.cross.{id}"),
                m.shape().to_vec(),
                m.data().to_vec(),
            ));
        }
        out.push(Entry::new(
            format!("layer{l}.self"),
            layer.self_map.shape().to_vec(),
            layer.self_map.data().to_vec(),
        ));
    }
    out
}

/// Files written by [`compose`] and the run that produced them.
#[derive(Clone, Debug)]
pub struct ComposeReport {
    pub trace: PathBuf,
    pub latent: PathBuf,
    pub preview: PathBuf,
    pub attention: Option<PathBuf>,
    pub rows: Vec<TraceRow>,
    pub run: SampleRun,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Runs `config` and writes `trace.csv`, `latent.lcb`, `preview.pgm` and,
/// when asked, `attention.lcb` into its output directory.
pub fn compose(config: &RunConfig) -> Result<ComposeReport> {
    let pipeline = Pipeline::from_config(config)?;
    let dir = config.output_path();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let trace_path = dir.join("trace.csv");
    let mut rows = Vec::new();
    let result = sample(&pipeline, config.seed, config.reinit, &mut rows);
    write(&trace_path, trace_csv(&rows).as_bytes())?;
    let run = result?;

    let latent_path = dir.join("latent.lcb");
    let z = &run.latent;
    container::write(
        &latent_path,
        &[Entry::new("latent", z.shape().to_vec(), z.data().to_vec())],
    )?;
    let preview_path = dir.join("preview.pgm");
    decode_preview(z)?.write_pgm(&preview_path)?;
    let attention = if config.dump_attention {
        let p = dir.join("attention.lcb");
        container::write(&p, &attention_entries(&run.last_record))?;
        Some(p)
    } else {
        None
    };
    Ok(ComposeReport {
        trace: trace_path,
        latent: latent_path,
        preview: preview_path,
        attention,
        rows,
        run,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_formatting() {
        let rows = [TraceRow {
            timestep: 25,
            iteration: 0,
            l_ce: 0.5,
            l_fill: 1.0,
            l_region: 0.25,
            total: 0.95,
            phi_t: 10.0,
            accepted: true,
        }];
        assert_eq!(
            trace_csv(&rows),
            format!("{TRACE_HEADER}\n25,0,0.5,1,0.25,0.95,10,1\n")
        );
    }
}
