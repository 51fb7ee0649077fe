//! The end-to-end mapping loop: frames in, a managed and refined panoptic
//! submap collection out.
//!
//! Per frame: parse → split into segments → associate each segment →
//! integrate it into its submap → age activity counters. Whenever submaps
//! turn inactive, overlap resolution, voxel reassignment, and CRF refinement
//! run over the affected ids. At end of stream every submap is forced
//! inactive and the same management chain runs once over the whole map, so
//! offline evaluation always sees a fully settled state.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use crate::audit::label_state_digest;
use crate::config::PipelineConfig;
use crate::error::Result;
use crate::ingest::{frame_to_segments, FrameStream};
use crate::integrator::integrate_segment_with;
use crate::manager::{
    find_overlaps, force_all_inactive, reassign_voxels, resolve_overlaps, tick_activity,
};
use crate::submap::{ClassTable, SubmapCollection};
use crate::tracker::{associate_segment, TrackingDecision, TrackingOutcome};
use crate::voxel::SubmapId;

/// Wall-clock seconds per stage, summed over the run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub parse: f64,
    pub associate: f64,
    pub integrate: f64,
    pub manage: f64,
    pub refine: f64,
    pub total: f64,
}

/// What a run did: stream statistics, management and refinement activity,
/// and stage timings.
#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub frames: usize,
    pub segments: usize,
    pub matched: usize,
    pub created: usize,
    pub discarded: usize,
    /// Inactivity transitions that triggered the management chain.
    pub management_events: usize,
    pub resolved_pairs: usize,
    pub merged_voxels: u64,
    pub moved_voxels: u64,
    pub orphan_relabels: u64,
    pub deleted_submaps: Vec<SubmapId>,
    /// Summed over every refinement invocation.
    pub refined_nodes: usize,
    pub semantic_changes: u64,
    pub instance_changes: u64,
    /// Label-state digest taken right before end-of-stream finalization.
    /// With no mid-stream inactivity events this equals the final digest of
    /// a run with management and refinement disabled.
    pub pre_finalize_digest: u64,
    pub timings: StageTimings,
}

fn manage_and_refine(
    collection: &mut SubmapCollection,
    seed_ids: &[SubmapId],
    cfg: &PipelineConfig,
    report: &mut RunReport,
) -> Result<()> {
    let mut touched: BTreeSet<SubmapId> = seed_ids.iter().copied().collect();

    if cfg.manage {
        let t = Instant::now();
        let pairs = find_overlaps(collection, seed_ids);
        for pair in &pairs {
            touched.insert(pair.a);
            touched.insert(pair.b);
            report.merged_voxels += resolve_overlaps(collection, pair, &cfg.manager)?;
        }
        report.resolved_pairs += pairs.len();
        let scan: Vec<SubmapId> = touched.iter().copied().collect();
        let re = reassign_voxels(collection, &scan, &cfg.manager)?;
        report.moved_voxels += re.moved;
        report.orphan_relabels += re.orphan_relabels;
        report.deleted_submaps.extend(re.deleted);
        report.timings.manage += t.elapsed().as_secs_f64();
    }

    if cfg.refine {
        let t = Instant::now();
        let live: Vec<SubmapId> =
            touched.iter().copied().filter(|id| collection.contains(*id)).collect();
        let rr = crate::crf::run_refinement(collection, &live, &cfg.crf, &cfg.manager)?;
        report.refined_nodes += rr.nodes;
        report.semantic_changes += rr.semantic_changes;
        report.instance_changes += rr.instance_changes;
        report.moved_voxels += rr.reassign.moved;
        report.orphan_relabels += rr.reassign.orphan_relabels;
        report.deleted_submaps.extend(rr.reassign.deleted);
        report.timings.refine += t.elapsed().as_secs_f64();
    }
    Ok(())
}

/// Runs the full pipeline over a frame manifest. The class table is loaded
/// from `classes_path` (the format written next to every scene manifest).
pub fn run_pipeline(
    manifest_path: &Path,
    classes_path: &Path,
    cfg: &PipelineConfig,
) -> Result<(SubmapCollection, RunReport)> {
    cfg.validate()?;
    let classes = ClassTable::load(classes_path)?;
    let mut collection = SubmapCollection::new(classes, cfg.voxel_size, cfg.truncation);
    let mut report = RunReport::default();
    let total = Instant::now();

    let mut stream = FrameStream::open(manifest_path, &collection.class_table)?;
    loop {
        let t = Instant::now();
        let Some(frame) = stream.next() else { break };
        let frame = frame?;
        let segments = frame_to_segments(&frame);
        report.timings.parse += t.elapsed().as_secs_f64();
        report.frames += 1;
        report.segments += segments.len();

        let mut decisions: Vec<TrackingDecision> = Vec::with_capacity(segments.len());
        for segment in &segments {
            let t = Instant::now();
            let mut decision = associate_segment(segment, &collection, &cfg.tracker)?;
            report.timings.associate += t.elapsed().as_secs_f64();

            let target = match decision.outcome {
                TrackingOutcome::MatchedSubmap(id) => {
                    report.matched += 1;
                    Some(id)
                }
                TrackingOutcome::NewSubmap => {
                    report.created += 1;
                    let id = collection.create_submap(segment.semantic_class)?;
                    // Count the new submap as matched so its activity
                    // counter starts fresh this frame.
                    decision.outcome = TrackingOutcome::MatchedSubmap(id);
                    Some(id)
                }
                TrackingOutcome::Discarded => {
                    report.discarded += 1;
                    None
                }
            };
            if let Some(id) = target {
                let t = Instant::now();
                let submap = collection.get_mut(id).expect("integration target exists");
                integrate_segment_with(submap, segment, &cfg.integrate)?;
                report.timings.integrate += t.elapsed().as_secs_f64();
            }
            decisions.push(decision);
        }

        let newly_inactive = tick_activity(&mut collection, &decisions, &cfg.manager);
        if !newly_inactive.is_empty() {
            report.management_events += 1;
            manage_and_refine(&mut collection, &newly_inactive, cfg, &mut report)?;
        }
    }

    report.pre_finalize_digest = label_state_digest(&collection);
    force_all_inactive(&mut collection, &cfg.manager);
    let all_ids = collection.ids();
    if !all_ids.is_empty() {
        report.management_events += 1;
        manage_and_refine(&mut collection, &all_ids, cfg, &mut report)?;
    }

    report.timings.total = total.elapsed().as_secs_f64();
    Ok((collection, report))
}
