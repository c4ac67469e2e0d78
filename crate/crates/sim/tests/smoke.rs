use recraft_sim::safety::check_safety;
use recraft_sim::trace::EventKind;
use recraft_sim::{run, Scenario};

const SPLIT: &str = r#"
name = "split"
seed = 3
horizon_ms = 6000
[[clusters]]
id = 1
members = [1, 2, 3, 4, 5, 6]
range = ":"
[[workload]]
at_ms = 500
op = "put"
client = 1
key = "a"
value = "1"
[[workload]]
at_ms = 500
op = "put"
client = 2
key = "z"
value = "2"
[[workload]]
at_ms = 1000
op = "split"
cluster = 1
subs = [{ cluster = 2, members = [1, 2, 3], range = ":m" }, { cluster = 3, members = [4, 5, 6], range = "m:" }]
[[workload]]
at_ms = 3000
op = "put"
client = 1
key = "b"
value = "3"
[[workload]]
at_ms = 3000
op = "get"
client = 2
key = "z"
"#;

#[test]
fn split_runs_clean() {
    let sc = Scenario::from_toml(SPLIT).unwrap();
    let trace = run(&sc).unwrap();
    let done: Vec<String> = trace
        .events
        .iter()
        .filter_map(|e| match &e.kind {
            EventKind::OpDone { op, ok, outcome, .. } => Some(format!("{op} {ok} {outcome}")),
            _ => None,
        })
        .collect();
    println!("{done:#?}");
    for f in &trace.finals {
        println!("{:?} {:?} {:?} {:?}", f.status.id, f.status.cluster, f.status.current, f.kv);
    }
    let v = check_safety(&trace);
    assert!(v.is_empty(), "{v:#?}");
    assert_eq!(done.len(), 5);
}
