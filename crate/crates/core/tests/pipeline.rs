use std::path::PathBuf;

use nmaipw::report::FitDocument;
use nmaipw::{
    eggers_test, fit_ipw_bootstrap, fit_mre, funnel_data, load_dataset, p_score, read_dataset, write_dataset,
    Direction, Schema, SelectionSpec, TauMode,
};

fn data_file(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

#[test]
fn registry_structure_with_four_designs_is_representable() {
    let data = load_dataset(data_file("antidepressant_structure.csv"), Schema::StudiesLongV1).unwrap();
    assert_eq!(data.counts_by_design(), vec![(35, 12), (25, 12), (8, 2), (1, 2)]);
    assert_eq!((data.n_published(), data.n_unpublished()), (69, 28));
    assert!(data.design(4).is_multi_arm());

    let mut buf = Vec::new();
    write_dataset(&data, &mut buf).unwrap();
    let back = read_dataset(buf.as_slice(), Schema::StudiesLongV1).unwrap();
    assert_eq!(back.studies(), data.studies());
    assert_eq!(back.designs(), data.designs());
}

#[test]
fn fit_adjust_rank_and_diagnose() {
    let data = load_dataset(data_file("antidepressant_structure.csv"), Schema::StudiesLongV1).unwrap();
    let mre = fit_mre(&data, TauMode::DesignSpecific).unwrap();
    assert!(mre.converged);
    assert_eq!(mre.params.reference.as_str(), "PBO");

    let spec: SelectionSpec = "logit2".parse().unwrap();
    let ipw = fit_ipw_bootstrap(&data, &spec, &mre.params.reference, TauMode::DesignSpecific, 100, 5).unwrap();
    assert!(ipw.selection.as_ref().unwrap().diagnostics.exact);
    // Upweighting the studies with small t statistics pulls both contrasts down.
    for (a, m) in ipw.fit.params.mu.iter().zip(&mre.params.mu) {
        assert!(a < m, "ipw {a} vs mre {m}");
    }

    let doc = FitDocument::from_ipw(&ipw, Some(5)).unwrap();
    let stored = p_score(&doc.league_table(), Direction::Higher).unwrap();
    let direct = p_score(&ipw, Direction::Higher).unwrap();
    assert_eq!(stored.order, direct.order);
    for (a, b) in stored.p_score.iter().zip(&direct.p_score) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(stored.treatments[stored.order[0]].as_str(), "PAR");

    let funnel = funnel_data(&data, &mre).unwrap();
    assert_eq!(funnel.points.len(), 70);
    assert_eq!(funnel.overlays.len(), 28);
    let egger = eggers_test(&data, &mre).unwrap();
    assert_eq!(egger.df, 68);
}
