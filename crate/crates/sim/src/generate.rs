//! Spec to script. All randomness comes from one ChaCha stream seeded by
//! `spec.seed`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vgate_core::ledger::Origin;
use vgate_core::packet::Tier;

use crate::script::{ArtifactPlan, DrillExecution, DrillPlan, ScenarioScript, Step, TaskPlan};
use crate::spec::{Cohort, Proportion, ReasonDetail, WorkloadSpec};
use crate::SimError;

/// Splits `n` by `parts`, floors first, leftovers to the largest remainders.
pub fn apportion(n: u64, parts: &[Proportion]) -> Vec<u64> {
    let mut out: Vec<u64> = Vec::with_capacity(parts.len());
    let mut rems: Vec<(u128, u128, usize)> = Vec::new();
    for (i, p) in parts.iter().enumerate() {
        let num = *p.0.numer() as u128 * n as u128;
        let den = *p.0.denom() as u128;
        out.push((num / den) as u64);
        rems.push((num % den, den, i));
    }
    let mut left = n - out.iter().sum::<u64>();
    // compare r1/d1 against r2/d2 exactly
    rems.sort_by(|a, b| (b.0 * a.1).cmp(&(a.0 * b.1)).then(a.2.cmp(&b.2)));
    for (_, _, i) in rems {
        if left == 0 {
            break;
        }
        if parts[i].0 != num_rational::Ratio::from_integer(0) {
            out[i] += 1;
            left -= 1;
        }
    }
    out
}

fn blank_plan(origin: Origin, tier: Tier) -> TaskPlan {
    TaskPlan {
        task_id: String::new(),
        session_id: String::new(),
        cluster_id: String::new(),
        origin,
        tier,
        under_pack: true,
        reach_verify: true,
        fault: None,
        skip_first: false,
        repeat: false,
        unresolved: false,
        complete: true,
        task_class: "change".to_owned(),
        diagnostic: false,
        reason_detail: ReasonDetail::Full,
        comparable: false,
    }
}

fn cohort_plans(c: &Cohort, rng: &mut ChaCha8Rng) -> Vec<TaskPlan> {
    let mut plans: Vec<TaskPlan> = (0..c.count)
        .map(|_| {
            let mut p = blank_plan(c.origin, c.tier);
            p.under_pack = c.under_pack;
            p.reach_verify = c.reach_verify;
            p.complete = false;
            p.task_class = c.task_class.clone();
            p.diagnostic = c.diagnostic;
            p.reason_detail = c.reason_detail;
            p
        })
        .collect();
    let mut i = 0usize;
    for (fault, n) in &c.faults {
        for _ in 0..*n {
            plans[i].fault = Some(*fault);
            i += 1;
        }
    }
    let faulted = i;
    for (k, p) in plans[..faulted].iter_mut().enumerate() {
        let k = k as u64;
        p.unresolved = k < c.unresolved;
        p.repeat = k >= c.unresolved && k < c.unresolved + c.repeat;
    }
    for p in plans[faulted..].iter_mut().take(c.skipped_first as usize) {
        p.skip_first = true;
    }
    if c.reach_verify {
        let admitted = c.count - c.unresolved;
        let mut left = c.complete.unwrap_or(admitted);
        for p in plans.iter_mut().filter(|p| !p.unresolved) {
            if left == 0 {
                break;
            }
            p.complete = true;
            left -= 1;
        }
    }
    let mut order: Vec<usize> = (0..plans.len()).collect();
    order.shuffle(rng);
    for idx in order.into_iter().take(c.comparable.unwrap_or(0) as usize) {
        plans[idx].comparable = true;
    }
    plans
}

fn rate_plans(spec: &WorkloadSpec, rng: &mut ChaCha8Rng) -> Result<Vec<TaskPlan>, SimError> {
    let n = spec.task_count;
    let origin_parts = spec.origin_mix.parts();
    let origin_counts = apportion(n, &origin_parts.map(|p| p.1));
    let tier_parts = spec.tier_mix.parts();
    let tier_counts = apportion(n, &tier_parts.map(|p| p.1));
    let mut tiers: Vec<Tier> = Vec::new();
    for ((t, _), k) in tier_parts.iter().zip(&tier_counts) {
        tiers.extend(std::iter::repeat_n(*t, *k as usize));
    }
    tiers.shuffle(rng);
    let mut plans: Vec<TaskPlan> = Vec::new();
    for ((o, _), k) in origin_parts.iter().zip(&origin_counts) {
        for _ in 0..*k {
            let tier = tiers[plans.len()];
            plans.push(blank_plan(*o, tier));
        }
    }
    plans.shuffle(rng);

    let reach = spec.verify_reach.of(n) as usize;
    for p in plans.iter_mut().skip(reach) {
        p.reach_verify = false;
        p.under_pack = false;
        p.complete = false;
    }
    let mut free: Vec<usize> = (0..reach).collect();
    free.shuffle(rng);
    let mut faulted: Vec<usize> = Vec::new();
    for (fault, rate) in &spec.fault_rates {
        let k = rate.of(reach as u64) as usize;
        for _ in 0..k {
            // deep tasks need the pack, which a claim without evidence cannot use
            let pos = if *fault == crate::spec::Fault::Phi4Absent {
                free.iter().position(|i| plans[*i].tier != Tier::Deep)
            } else {
                (!free.is_empty()).then_some(0)
            };
            let Some(pos) = pos else {
                return Err(SimError::InvalidProportions(format!(
                    "not enough eligible tasks for {fault:?} faults"
                )));
            };
            let i = free.remove(pos);
            plans[i].fault = Some(*fault);
            if *fault == crate::spec::Fault::Phi4Absent {
                plans[i].under_pack = false;
            }
            faulted.push(i);
        }
    }
    let unresolved = spec.unresolved_rate.of(faulted.len() as u64) as usize;
    for (k, i) in faulted.iter().enumerate() {
        plans[*i].unresolved = k < unresolved;
        plans[*i].complete = k >= unresolved;
    }
    let repeat = spec.repeat_rate.of((faulted.len() - unresolved) as u64) as usize;
    for i in faulted.iter().skip(unresolved).take(repeat) {
        plans[*i].repeat = true;
    }
    let skip = spec.skip_rate.of(free.len() as u64) as usize;
    for i in free.iter().take(skip) {
        plans[*i].skip_first = true;
    }
    Ok(plans)
}

pub fn generate_workload(spec: &WorkloadSpec) -> Result<ScenarioScript, SimError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut plans: Vec<TaskPlan> = if spec.cohorts.is_empty() {
        rate_plans(spec, &mut rng)?
    } else {
        let mut v = Vec::new();
        for c in &spec.cohorts {
            v.extend(cohort_plans(c, &mut rng));
        }
        v
    };
    plans.shuffle(&mut rng);
    let mut steps: Vec<Step> = plans.into_iter().map(Step::Task).collect();
    for k in 0..spec.rollback_drills {
        let execution = if k < spec.failing_rollback_drills {
            DrillExecution::Failed
        } else if k < spec.failing_rollback_drills + spec.denied_rollback_drills {
            DrillExecution::Denied
        } else {
            DrillExecution::Executed
        };
        steps.push(Step::Drill(DrillPlan {
            task_id: String::new(),
            session_id: String::new(),
            cluster_id: String::new(),
            tier: Tier::Standard,
            execution,
            comparable: false,
        }));
    }
    for _ in 0..spec.missing_outcome_artifacts {
        steps.push(Step::Artifact(ArtifactPlan {
            task_id: String::new(),
            session_id: String::new(),
            cluster_id: String::new(),
        }));
    }
    // drills and artifacts land at seeded positions among the tasks
    let extra = steps.len() - spec.task_count as usize;
    if extra > 0 {
        steps.shuffle(&mut rng);
    }
    let (mut task_no, mut artifact_no) = (0u64, 0u64);
    for s in steps.iter_mut() {
        match s {
            Step::Artifact(a) => {
                artifact_no += 1;
                a.task_id = format!("A-{artifact_no:04}");
            }
            Step::Task(TaskPlan { task_id, .. }) | Step::Drill(DrillPlan { task_id, .. }) => {
                task_no += 1;
                *task_id = format!("T-{task_no:05}");
            }
        }
    }
    place(&mut steps, spec)?;
    Ok(ScenarioScript {
        seed: spec.seed,
        slice: spec.slice.clone(),
        rotate_every: spec.rotate_every,
        padding: spec.padding.clone(),
        steps,
    })
}

/// Sessions are consecutive chunks. The first cluster takes rows greedily
/// up to its target; the rest round-robin over the other clusters.
fn place(steps: &mut [Step], spec: &WorkloadSpec) -> Result<(), SimError> {
    let clusters = spec.cluster_profile.clusters;
    let total_rows: u64 = steps.iter().map(Step::verify_rows).sum();
    let target = if clusters == 1 {
        total_rows
    } else {
        spec.cluster_profile.top_cluster_share.of(total_rows)
    };
    let mut top_rows = 0u64;
    let mut rr = 0u32;
    for (i, s) in steps.iter_mut().enumerate() {
        let session = format!("S-{:04}", i as u64 / spec.session_size + 1);
        let rows = s.verify_rows();
        let cluster = if top_rows + rows <= target {
            top_rows += rows;
            1
        } else {
            rr += 1;
            2 + (rr - 1) % (clusters - 1)
        };
        s.set_placement(session, format!("C-{cluster:02}"));
    }
    if top_rows != target {
        return Err(SimError::InvalidProportions(format!(
            "top cluster reached {top_rows} rows, target {target}"
        )));
    }
    Ok(())
}
