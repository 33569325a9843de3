use addrshift_core::{io, Dims, TensorView};

fn run(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("addrshift").chain(args.iter().copied());
    let code = addrshift_cli::run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn logits(text: &str) -> Vec<f64> {
    text.lines()
        .flat_map(|l| {
            l.split_once(": ")
                .unwrap()
                .1
                .split(' ')
                .map(|v| v.parse::<f64>().unwrap())
        })
        .collect()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["frobnicate"]).0, 2);
    assert_eq!(run(&["describe"]).0, 2);
    assert_eq!(run(&["bench", "--dims", "1,2,3"]).0, 2);
    assert_eq!(run(&["--help"]).0, 0);
}

#[test]
fn runtime_errors_exit_1() {
    let (code, _, err) = run(&["describe", "--net", "resnet-50"]);
    assert_eq!(code, 1);
    assert!(err.contains("resnet-50"), "{err}");
    assert_eq!(run(&["bench", "--op", "channel_shift", "--reps", "3"]).0, 1);
}

#[test]
fn verify_shift_passes() {
    let (code, out, _) = run(&["verify", "--suite", "shift", "--seed", "4"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("address_vs_feature_map_shift"));
    assert!(!out.contains("FAIL"));
}

#[test]
fn describe_csv_parses() {
    let (code, out, _) = run(&["describe", "--net", "addressnet-20", "--format", "csv"]);
    assert_eq!(code, 0);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("layer,type,params,flops,copied,transformed"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert!(rows.len() > 20);
    let mut params = 0u64;
    for r in &rows {
        assert_eq!(r.len(), 6, "{r:?}");
        params += r[2].parse::<u64>().unwrap();
        for v in &r[3..] {
            v.parse::<u64>().unwrap();
        }
    }
    assert_eq!(params, 81_520);
}

#[test]
fn describe_table_shows_totals() {
    let (code, out, _) = run(&["describe", "--net", "addressnet-44"]);
    assert_eq!(code, 0);
    assert!(out.contains("stage3"), "{out}");
    let (code, out, _) = run(&["describe", "--net", "enhanced-a", "--format", "json"]);
    assert_eq!(code, 0);
    let doc: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(doc["spec"]["classes"], 1000);
}

#[test]
fn forward_folded_matches_unfolded() {
    let (c1, plain, _) = run(&["forward", "--net", "addressnet-20", "--seed", "1", "--batch", "2"]);
    let (c2, folded, _) = run(&[
        "forward",
        "--net",
        "addressnet-20",
        "--seed",
        "1",
        "--batch",
        "2",
        "--folded",
    ]);
    assert_eq!((c1, c2), (0, 0));
    let (a, b) = (logits(&plain), logits(&folded));
    assert_eq!(a.len(), 200);
    let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff <= 1e-4, "{diff}");
}

#[test]
fn forward_reads_tensor_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.shft");
    let x = TensorView::<f32>::from_fn(Dims::new(1, 3, 32, 32).unwrap(), |i| ((i % 17) as f32 - 8.0) / 8.0).unwrap();
    io::write_tensor(&path, &x).unwrap();
    let p = path.to_str().unwrap();
    let (code, first, _) = run(&["forward", "--net", "enhanced-20", "--input", p, "--format", "json"]);
    assert_eq!(code, 0);
    let doc: serde_json::Value = serde_json::from_str(&first).unwrap();
    assert_eq!(doc["logits"].as_array().unwrap().len(), 100);
    assert_eq!(
        run(&["forward", "--net", "enhanced-20", "--input", p, "--format", "json"]).1,
        first
    );

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, &bytes).unwrap();
    let (code, _, err) = run(&["forward", "--net", "enhanced-20", "--input", p]);
    assert_eq!(code, 1);
    assert!(err.contains("malformed"), "{err}");

    let wrong = TensorView::<f32>::zeros(Dims::new(1, 4, 8, 8).unwrap()).unwrap();
    io::write_tensor(&path, &wrong).unwrap();
    assert_eq!(run(&["forward", "--net", "enhanced-20", "--input", p]).0, 1);
}

#[test]
fn bench_reports_predicted_copies() {
    let (code, out, _) = run(&["bench", "--op", "channel_shift", "--dims", "1,16,8,8", "--groups", "4"]);
    assert_eq!(code, 0);
    let mut lines = out.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| row[header.iter().position(|h| *h == name).unwrap()];
    assert_eq!(col("op"), "channel_shift");
    assert_eq!(col("copied"), "128");
}

#[test]
fn train_toy_writes_curve() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("curve.csv");
    let (code, out, _) = run(&["train-toy", "--steps", "5", "--out", path.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(out.starts_with("initial loss"), "{out}");
    let csv = std::fs::read_to_string(&path).unwrap();
    assert_eq!(csv.lines().next(), Some("step,loss,accuracy"));
    assert_eq!(csv.lines().count(), 6);
    assert_eq!(run(&["train-toy", "--lr=-1"]).0, 1);
}
