//! Scratch probe: what does each submap's label layer hold in a raw
//! (unmanaged) run of the noisy cluttered scene? Not a real test.

#[test]
#[ignore]
fn raw_label_cell_stats() {
    use panvox::config::PipelineConfig;
    use panvox::pipeline::run_pipeline;
    use panvox::synth::{generate_synthetic_scene, SceneSpec};

    let mut spec = SceneSpec::cluttered(10, 1).unwrap();
    spec.label_noise = 0.2;
    let dir = tempfile::tempdir().unwrap();
    let scene = generate_synthetic_scene(&spec, dir.path()).unwrap();

    let mut cfg = PipelineConfig::indoor();
    cfg.tracker.tau_iou = 0.10;
    cfg.integrate.min_surface_points = 2;
    cfg.manage = false;
    cfg.refine = false;

    let (raw, _) = run_pipeline(&scene.manifest_path, &scene.class_table_path, &cfg).unwrap();
    for s in raw.iter() {
        let mut cells = 0u64;
        let mut low_votes = 0u64; // total votes <= 3
        let mut near_floor = 0u64; // |z| <= 2 voxels
        let mut own_majority = 0u64; // cached instance == own id
        let mut vote_sum = 0u64;
        for (g, v) in s.labels.iter_observed() {
            cells += 1;
            let votes = v.instance_counts.total() as u64;
            vote_sum += votes;
            if votes <= 3 {
                low_votes += 1;
            }
            if g.z.abs() <= 2 {
                near_floor += 1;
            }
            if v.cached.map(|c| c.instance_id) == Some(s.id()) {
                own_majority += 1;
            }
        }
        eprintln!(
            "submap {:2} class {} thing={} cells={:6} mean_votes={:6.1} low_votes={:6} near_floor={:6} own_majority={:6}",
            s.id(),
            s.class_id,
            s.is_thing,
            cells,
            vote_sum as f64 / cells.max(1) as f64,
            low_votes,
            near_floor,
            own_majority
        );
    }
}
