use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use sparkattn::oracle::{attention_grad_ref, attention_ref, tensor_error};
use sparkattn::spat::SpatTensor;
use sparkattn::workload::Workload;
use sparkattn::{backward_fused, forward_fused, AttnConfig, Half, KernelRegistry, Tensor};

use crate::args::{BackwardArgs, ForwardArgs, GenArgs, RunOpts, Shape, SweepArgs, Toggle};
use crate::report::{
    forward_tolerance, BackwardReport, Check, ForwardReport, ForwardRun, GradErrors, PassSection, SweepRow,
    BACKWARD_TOLERANCE,
};

/// Whether every requested verification passed.
#[derive(Debug, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    fn from_pass(pass: bool) -> Self {
        if pass {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }
}

fn load_half(dir: &Path, name: &str) -> Result<Tensor<Half>> {
    let path = dir.join(format!("{name}.spat"));
    SpatTensor::load(&path)
        .and_then(SpatTensor::into_half)
        .with_context(|| format!("reading {}", path.display()))
}

/// Inputs and base configuration (accumulation mode still to be set).
fn prepare(shape: &Shape, run: &RunOpts, need_grad: bool) -> Result<(AttnConfig, Workload)> {
    let (dims, inputs) = match &run.inputs {
        Some(dir) => {
            let q = load_half(dir, "q")?;
            let &[b, h, n, d] = q.shape() else {
                bail!("q.spat must have rank 4 [batch, heads, seq_len, head_dim], got {:?}", q.shape());
            };
            let k = load_half(dir, "k")?;
            let v = load_half(dir, "v")?;
            let d_o = if need_grad {
                load_half(dir, "do")?
            } else {
                Tensor::zeros(q.shape())
            };
            ((b, h, n, d), Some(Workload { q, k, v, d_o }))
        }
        None => ((shape.batch, shape.heads, shape.n, shape.d), None),
    };
    let (b, h, n, d) = dims;
    let default_tile = AttnConfig::new(b, h, n, d).tile_rows;
    let cfg = AttnConfig::new(b, h, n, d)
        .with_tiles(run.br.unwrap_or(default_tile), run.bc.unwrap_or(default_tile))
        .with_causal(run.causal)
        .with_dropout(run.dropout, run.seed);
    cfg.validate()?;
    let workload = inputs.unwrap_or_else(|| Workload::generate(&cfg, run.seed));
    Ok((cfg, workload))
}

fn emit(out: Option<&Path>, body: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, body).with_context(|| format!("writing {}", path.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(body.as_bytes())?;
            Ok(())
        }
    }
}

fn json(value: &impl serde::Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn save(dir: &Path, tensors: &[(&str, SpatTensor)]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, t) in tensors {
        let path = dir.join(format!("{name}.spat"));
        t.save(&path).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn forward(args: &ForwardArgs) -> Result<Verdict> {
    if args.acc.is_empty() || args.kernels.is_empty() {
        bail!("--acc and --kernels need at least one value");
    }
    let registry = KernelRegistry::with_defaults();
    for name in &args.kernels {
        registry.get(name)?;
    }
    let (base, w) = prepare(&args.shape, &args.run, false)?;
    let start = Instant::now();
    let reference = if args.run.verify {
        Some(attention_ref(&w.q.to_f64(), &w.k.to_f64(), &w.v.to_f64(), &base)?)
    } else {
        None
    };

    let mut runs = Vec::new();
    let mut saved = false;
    for &acc in &args.acc {
        let cfg = base.clone().with_acc(acc);
        for name in &args.kernels {
            let out = registry.get(name)?.forward(&w.q, &w.k, &w.v, &cfg)?;
            let error = match &reference {
                Some(r) => Some(tensor_error(&out.o.to_f64(), &r.o)?),
                None => None,
            };
            let check = error.as_ref().map(|m| Check::new("o", m, forward_tolerance(name, acc)));
            if let (Some(dir), false) = (&args.save, saved) {
                save(dir, &[("o", SpatTensor::F16(out.o.clone())), ("lse", SpatTensor::F32(out.lse.clone()))])?;
                saved = true;
            }
            runs.push(ForwardRun {
                kernel: name.clone(),
                acc_mode: acc,
                mask_digest: out.mask_digest.hex(),
                mask_decisions: out.mask_digest.count(),
                traffic: out.traffic,
                error,
                check,
            });
        }
    }

    let verified = args
        .run
        .verify
        .then(|| runs.iter().all(|r| r.check.as_ref().is_some_and(|c| c.pass)));
    let report = ForwardReport {
        command: "forward",
        config: (&base).into(),
        runs,
        verified,
        wall_clock_ms: args.run.timing.then(|| start.elapsed().as_secs_f64() * 1e3),
    };
    emit(args.run.out.as_deref(), &json(&report)?)?;
    Ok(Verdict::from_pass(verified.unwrap_or(true)))
}

pub fn backward(args: &BackwardArgs) -> Result<Verdict> {
    let (base, w) = prepare(&args.shape, &args.run, true)?;
    let cfg = base.with_acc(args.acc);
    let start = Instant::now();
    let fwd = forward_fused(&w.q, &w.k, &w.v, &cfg)?;
    let g = backward_fused(&w.q, &w.k, &w.v, &w.d_o, &fwd.lse, &cfg)?;
    let digest_match = fwd.mask_digest == g.mask_digest;

    let mut checks = Vec::new();
    let error = if args.run.verify {
        let r = attention_grad_ref(&w.q.to_f64(), &w.k.to_f64(), &w.v.to_f64(), &w.d_o.to_f64(), &cfg)?;
        let e = GradErrors {
            dq: tensor_error(&g.dq.to_f64(), &r.dq)?,
            dk: tensor_error(&g.dk.to_f64(), &r.dk)?,
            dv: tensor_error(&g.dv.to_f64(), &r.dv)?,
        };
        for (name, m) in [("dq", &e.dq), ("dk", &e.dk), ("dv", &e.dv)] {
            checks.push(Check::new(name, m, BACKWARD_TOLERANCE));
        }
        Some(e)
    } else {
        None
    };
    if let Some(dir) = &args.save {
        save(
            dir,
            &[
                ("dq", SpatTensor::F16(g.dq.clone())),
                ("dk", SpatTensor::F16(g.dk.clone())),
                ("dv", SpatTensor::F16(g.dv.clone())),
            ],
        )?;
    }

    let verified = args
        .run
        .verify
        .then(|| digest_match && checks.iter().all(|c| c.pass));
    let report = BackwardReport {
        command: "backward",
        config: (&cfg).into(),
        acc_mode: cfg.acc_mode,
        forward: PassSection {
            mask_digest: fwd.mask_digest.hex(),
            mask_decisions: fwd.mask_digest.count(),
            traffic: fwd.traffic,
        },
        backward: PassSection {
            mask_digest: g.mask_digest.hex(),
            mask_decisions: g.mask_digest.count(),
            traffic: g.traffic,
        },
        mask_digest_match: digest_match,
        error,
        checks,
        verified,
        wall_clock_ms: args.run.timing.then(|| start.elapsed().as_secs_f64() * 1e3),
    };
    emit(args.run.out.as_deref(), &json(&report)?)?;
    Ok(Verdict::from_pass(verified.unwrap_or(true)))
}

pub fn sweep(args: &SweepArgs) -> Result<Verdict> {
    if args.n.is_empty() || args.d.is_empty() || args.causal.is_empty() || args.acc.is_empty() || args.kernels.is_empty() {
        bail!("empty sweep: every list flag needs at least one value");
    }
    let registry = KernelRegistry::with_defaults();
    for name in &args.kernels {
        registry.get(name)?;
    }
    let mut csv = csv::Writer::from_writer(Vec::new());
    let mut all_pass = true;
    for &n in &args.n {
        for &d in &args.d {
            for &causal in &args.causal {
                let base = AttnConfig::new(args.batch, args.heads, n, d)
                    .with_causal(causal == Toggle::On)
                    .with_dropout(args.dropout, args.seed);
                base.validate()?;
                let w = Workload::generate(&base, args.seed);
                let reference = if args.verify {
                    Some(attention_ref(&w.q.to_f64(), &w.k.to_f64(), &w.v.to_f64(), &base)?)
                } else {
                    None
                };
                for &acc in &args.acc {
                    let cfg = base.clone().with_acc(acc);
                    for name in &args.kernels {
                        let out = registry.get(name)?.forward(&w.q, &w.k, &w.v, &cfg)?;
                        let m = match &reference {
                            Some(r) => Some(tensor_error(&out.o.to_f64(), &r.o)?),
                            None => None,
                        };
                        let pass = m.map(|m| m.mean_rel <= forward_tolerance(name, acc));
                        all_pass &= pass.unwrap_or(true);
                        let t = &out.traffic;
                        csv.serialize(SweepRow {
                            n,
                            d,
                            heads: args.heads,
                            batch: args.batch,
                            causal: cfg.causal,
                            acc_mode: acc,
                            kernel: name.clone(),
                            mean_rel: m.map(|m| m.mean_rel),
                            max_rel: m.map(|m| m.max_rel),
                            mean_abs: m.map(|m| m.mean_abs),
                            max_abs: m.map(|m| m.max_abs),
                            pass,
                            matrix_pass_reads: t.matrix_pass_reads,
                            matrix_pass_writes: t.matrix_pass_writes,
                            element_reads: t.element_reads,
                            element_writes: t.element_writes,
                            mma_invocations: t.mma_invocations,
                            shuffle_events: t.shuffle_events,
                            convert_events: t.convert_events,
                            layout_shuffle_events: t.layout_shuffle_events,
                            layout_convert_events: t.layout_convert_events,
                            mask_digest: out.mask_digest.hex(),
                        })?;
                    }
                }
            }
        }
    }
    let body = String::from_utf8(csv.into_inner()?)?;
    emit(args.out.as_deref(), &body)?;
    Ok(Verdict::from_pass(all_pass))
}

pub fn gen(args: &GenArgs) -> Result<Verdict> {
    let cfg = AttnConfig::new(args.shape.batch, args.shape.heads, args.shape.n, args.shape.d);
    let w = Workload::generate(&cfg, args.seed);
    save(
        &args.out_dir,
        &[
            ("q", SpatTensor::F16(w.q)),
            ("k", SpatTensor::F16(w.k)),
            ("v", SpatTensor::F16(w.v)),
            ("do", SpatTensor::F16(w.d_o)),
        ],
    )?;
    Ok(Verdict::Pass)
}
