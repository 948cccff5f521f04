use renewqif_client::api::*;
use renewqif_client::Client;
use renewqif_core::bench::{Scale, Table};
use renewqif_core::simulate::SimConfig;
use renewqif_core::stream::StreamConfig;
use renewqif_core::{CorrStructure, Family, ModelSpec};

fn start() -> (tokio::runtime::Runtime, Client) {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let (addr, _) = rt.block_on(renewqif_server::spawn("127.0.0.1:0".parse().unwrap())).unwrap();
    (rt, Client::new(format!("http://{addr}/")).unwrap())
}

#[test]
fn client_drives_a_session() {
    let (_rt, c) = start();
    assert_eq!(c.health().unwrap().status, "ok");
    let sim = c.simulate(&SimulateRequest { config: SimConfig::standard(Family::GaussianIdentity, 40, 3, 9) }).unwrap();
    let model = ModelSpec::new(Family::GaussianIdentity, 5, CorrStructure::CompoundSymmetry).unwrap();
    let config = StreamConfig { track_gee: true, ..StreamConfig::default() };
    let created = c.create_session(&CreateSessionRequest { model, config, batch: sim.batches[0].clone() }).unwrap();
    for b in &sim.batches[1..] {
        c.add_batch(created.id, b).unwrap();
    }
    let report = c.session_report(created.id).unwrap();
    assert_eq!(report.report.n_total, 120);
    assert_eq!(report.gee.unwrap().len(), 5);
    assert_eq!(c.list_sessions().unwrap().ids, vec![created.id]);
    c.delete_session(created.id).unwrap();
    let err = c.session_report(created.id).unwrap_err();
    assert_eq!(err.kind(), Some(WireErrorKind::NotFound));
    assert!(c.delete_session(created.id).is_err());
}

#[test]
fn client_surfaces_service_errors() {
    let (_rt, c) = start();
    let err = c.stream_report(&StateBlob { state: "!!".into() }).unwrap_err();
    assert_eq!(err.kind(), Some(WireErrorKind::StateCorrupt));
    let bench = c.bench(&BenchRequest { table: Table::LinearFixedN, reps: 1, scale: Scale::Smoke, seed: 1, trace_dir: None }).unwrap();
    assert!(!bench.rows.is_empty());
}

#[test]
fn unreachable_service_is_a_transport_error() {
    let c = Client::new("http://127.0.0.1:9").unwrap();
    assert_eq!(c.health().unwrap_err().kind(), None);
}
