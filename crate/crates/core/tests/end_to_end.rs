use std::path::Path;

use normlab::harness::checkpoint::load_state;
use normlab::harness::config::RunConfig;
use normlab::harness::run::{run_config_file, run_experiment, Experiment, CHECKPOINT_FILE, METRICS_FILE};

const CONFIG: &str = "
data.n = 96
data.k = 6
data.d_latent = 4
data.d_raw_image = 7
data.d_raw_text = 5
encoder.kind = mlp1
encoder.dim = 4
encoder.hidden = 8
batch_size = 16
steps = 12
eval_every = 4
npn.m = 16
npn.t_r = 5
npn.t_u = 3
";

fn experiment(method: &str) -> Experiment {
    let text = format!("{CONFIG}method = {method}\n");
    Experiment::new(RunConfig::parse(&text, Path::new(".")).unwrap()).unwrap()
}

#[test]
fn config_file_run_writes_log_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.cfg");
    std::fs::write(&path, format!("{CONFIG}method = neuclip\noutput.dir = out\n")).unwrap();
    let out = run_config_file(&path).unwrap();
    let log = std::fs::read_to_string(dir.path().join("out").join(METRICS_FILE)).unwrap();
    assert_eq!(log.lines().count(), out.records.len());
    assert_eq!(
        out.records.iter().map(|r| r.step).collect::<Vec<_>>(),
        vec![0, 4, 8, 12]
    );

    let exp = Experiment::new(RunConfig::load(&path).unwrap()).unwrap();
    let state = load_state(
        &dir.path().join("out").join(CHECKPOINT_FILE),
        exp.fresh_state().unwrap(),
    )
    .unwrap();
    assert_eq!(state, out.state);
    assert_eq!(&exp.evaluate(&state, 0).unwrap(), out.records.last().unwrap());
}

#[test]
fn thread_count_does_not_change_results() {
    for method in ["minibatch", "fastclip", "neuclip", "simultaneous"] {
        let exp = experiment(method);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| run_experiment(&exp, None).unwrap());
        let b = four.install(|| run_experiment(&exp, None).unwrap());
        assert_eq!(a.records, b.records, "{method}");
        assert_eq!(a.state.checksum(), b.state.checksum(), "{method}");
    }
}

#[test]
fn every_method_reduces_the_loss() {
    for method in ["minibatch", "fastclip", "neuclip", "simultaneous"] {
        let text = format!(
            "data.n = 256\ndata.k = 8\nencoder.kind = direct\nencoder.dim = 8\nencoder.lr = 0.01\n\
             batch_size = 32\nsteps = 200\neval_every = 200\nnpn.m = 32\nnpn.t_r = inf\nmethod = {method}\n"
        );
        let exp = Experiment::new(RunConfig::parse(&text, Path::new(".")).unwrap()).unwrap();
        let out = run_experiment(&exp, None).unwrap();
        let (first, last) = (&out.records[0], out.records.last().unwrap());
        assert!(
            last.gcl_value_on_eval_pool < first.gcl_value_on_eval_pool,
            "{method}: {} -> {}",
            first.gcl_value_on_eval_pool,
            last.gcl_value_on_eval_pool
        );
    }
}
