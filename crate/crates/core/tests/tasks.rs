use chainboost::tasks::{eos, gen_dataset, mark, read_dataset, sep, write_dataset, TaskKind, TaskSpec};

fn spec(kind: TaskKind) -> TaskSpec {
    TaskSpec { kind, samples: 64, ..TaskSpec::default() }
}

#[test]
fn copy_gold_repeats_payload() {
    let data = gen_dataset(&TaskSpec { min_len: 8, max_len: 8, ..spec(TaskKind::Copy) }).unwrap();
    for ex in &data {
        let mut seq = ex.input.clone();
        seq.push(eos(16));
        assert_eq!(seq[8], sep(16));
        assert_eq!(&seq[..8], &seq[9..17]);
        for (t, g) in ex.gold.iter().enumerate() {
            assert_eq!(*g, (t >= 8).then(|| seq[t + 1]));
        }
        assert!(ex.input.len() <= TaskSpec::default().max_input_len().max(17));
    }
}

#[test]
fn reverse_gold_mirrors_payload() {
    for ex in gen_dataset(&spec(TaskKind::Reverse)).unwrap() {
        let n = ex.input.iter().position(|&x| x == sep(16)).unwrap();
        let tail: Vec<usize> = ex.gold[n..].iter().map(|g| g.unwrap()).collect();
        let mut expect: Vec<usize> = ex.input[..n].iter().rev().copied().collect();
        expect.push(eos(16));
        assert_eq!(tail, expect);
    }
}

#[test]
fn modsum_labels_replay_the_rule() {
    for ex in gen_dataset(&TaskSpec { min_len: 4, max_len: 10, ..spec(TaskKind::Modsum) }).unwrap() {
        assert_eq!(ex.gold[0], None);
        for t in 1..ex.input.len() {
            let g = ex.gold[t].unwrap();
            assert!(g < 7);
            assert_eq!(g, (ex.input[t] + ex.input[t - 1]) % 7);
        }
    }
}

#[test]
fn needle_retrieves_the_marked_token() {
    let task = spec(TaskKind::Needle);
    for ex in gen_dataset(&task).unwrap() {
        let m = mark(16);
        let first = ex.input.iter().position(|&x| x == m).unwrap();
        let n = ex.input.len();
        assert_eq!(ex.input[n - 2], m);
        assert_eq!(ex.gold[n - 2], Some(ex.input[first + 1]));
        assert_eq!(ex.gold[n - 1], Some(eos(16)));
        assert_eq!(ex.supervised(), 2);
        assert!(n <= task.max_input_len());
    }
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    for p in [&a, &b] {
        write_dataset(p, &gen_dataset(&spec(TaskKind::Needle)).unwrap()).unwrap();
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(read_dataset(&a).unwrap(), gen_dataset(&spec(TaskKind::Needle)).unwrap());
    let other = gen_dataset(&TaskSpec { seed: 2, ..spec(TaskKind::Needle) }).unwrap();
    assert_ne!(other, read_dataset(&a).unwrap());
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(gen_dataset(&TaskSpec { min_len: 5, max_len: 4, ..TaskSpec::default() }).is_err());
    assert!(gen_dataset(&TaskSpec { modulus: 20, ..spec(TaskKind::Modsum) }).is_err());
    assert!(gen_dataset(&TaskSpec { vocab: 4, ..TaskSpec::default() }).is_err());
    assert!("mystery".parse::<TaskKind>().is_err());
    for k in TaskKind::ALL {
        assert_eq!(k.to_string().parse::<TaskKind>().unwrap(), k);
    }
}
