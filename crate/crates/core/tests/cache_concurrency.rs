use std::fs;
use std::process::{Command, Stdio};
use std::sync::{Arc, Barrier};

use brittle_homog::cli_io::{Cache, CacheLookup, CellFRow, ResultRecord, Tables, VERSION};

fn record(key: &str, writer: usize) -> ResultRecord {
    ResultRecord {
        version: VERSION.into(),
        config_hash: key.into(),
        operation: "cell-f".into(),
        inputs: serde_json::json!({ "writer": writer }),
        tables: Tables {
            cell_f: (0..200)
                .map(|k| CellFRow { a: 0.25, m: k.to_string(), xi: vec![1.0, 0.0], fhat: writer as f64, residual: 0.0 })
                .collect(),
            ..Tables::default()
        },
        checks: Vec::new(),
        flags: Vec::new(),
        details: serde_json::Value::Null,
        seconds: 0.0,
        checksum: String::new(),
    }
    .seal()
}

#[test]
fn concurrent_puts_leave_one_valid_record() {
    let dir = tempfile::tempdir().unwrap();
    let writers = 8;
    let barrier = Arc::new(Barrier::new(writers + 1));
    let path = dir.path().to_path_buf();
    let mut handles = Vec::new();
    for w in 0..writers {
        let (b, p) = (barrier.clone(), path.clone());
        handles.push(std::thread::spawn(move || {
            let cache = Cache::new(p);
            b.wait();
            for _ in 0..20 {
                cache.put(&record("samekey", w)).unwrap();
            }
        }));
    }
    let reader = {
        let (b, p) = (barrier.clone(), path.clone());
        std::thread::spawn(move || {
            let cache = Cache::new(p);
            b.wait();
            let mut hits = 0;
            for _ in 0..400 {
                match cache.get("samekey") {
                    CacheLookup::Hit(_) => hits += 1,
                    CacheLookup::Miss => {}
                    CacheLookup::Corrupt(e) => panic!("reader saw a partial record: {e}"),
                }
            }
            hits
        })
    };
    for h in handles {
        h.join().unwrap();
    }
    reader.join().unwrap();

    let names: Vec<String> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(names, vec!["samekey.json".to_string()]);
    match Cache::new(dir.path()).get("samekey") {
        CacheLookup::Hit(r) => assert!(r.inputs["writer"].as_u64().unwrap() < writers as u64),
        other => panic!("expected a valid record, got {other:?}"),
    }
}

#[test]
fn concurrent_processes_share_a_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    fs::write(dir.path().join("c.cfg"), "[solver]\nM = 8\n").unwrap();
    let children: Vec<_> = (0..4)
        .map(|k| {
            Command::new(env!("CARGO_BIN_EXE_brittle-homog"))
                .current_dir(dir.path())
                .env("BH_CACHE_DIR", &cache)
                .args(["cell-f", "-c", "c.cfg", "--force", "-o", &format!("out{k}")])
                .stdout(Stdio::null())
                .spawn()
                .unwrap()
        })
        .collect();
    let mut csvs = Vec::new();
    for (k, child) in children.into_iter().enumerate() {
        let out = child.wait_with_output().unwrap();
        assert_eq!(out.status.code(), Some(0));
        csvs.push(fs::read(dir.path().join(format!("out{k}/cell_f.csv"))).unwrap());
    }
    assert!(csvs.windows(2).all(|w| w[0] == w[1]));
    let (records, warnings) = Cache::new(&cache).records();
    assert_eq!((records.len(), warnings.len()), (1, 0));
    assert_eq!(fs::read_dir(&cache).unwrap().count(), 1);
}
