use ecgqa_core::metrics::*;
use proptest::prelude::*;

fn toks(s: &str) -> Vec<String> {
    normalize(s)
}

fn brute_force_lcs(a: &[u8], b: &[u8]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<u8> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| a[i]).collect();
        if sub.len() <= best {
            continue;
        }
        let mut it = b.iter();
        if sub.iter().all(|x| it.any(|y| y == x)) {
            best = sub.len();
        }
    }
    best
}

fn sequences(max_len: usize, alphabet: u8) -> Vec<Vec<u8>> {
    let mut all = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 0..alphabet {
                let mut t = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        all.extend(next.iter().cloned());
        frontier = next;
    }
    all
}

#[test]
fn lcs_matches_exhaustive_search_up_to_length_six() {
    let seqs = sequences(6, 2);
    let strs = |s: &[u8]| s.iter().map(|c| c.to_string()).collect::<Vec<_>>();
    let short = sequences(4, 3);
    for a in &seqs {
        for b in seqs.iter().step_by(7) {
            assert_eq!(lcs_len(&strs(a), &strs(b)), brute_force_lcs(a, b), "{a:?} / {b:?}");
        }
    }
    for a in &short {
        for b in &short {
            assert_eq!(lcs_len(&strs(a), &strs(b)), brute_force_lcs(a, b), "{a:?} / {b:?}");
        }
    }
}

#[test]
fn hand_computed_scores() {
    let acc = overlap_accuracy(&toks("yes"), &toks("yes")).unwrap();
    assert!((acc - 1.0).abs() < 1e-12);
    let b = bleu1(&toks("left axis deviation"), &toks("left axis"));
    assert!((b - 2.0 / 3.0).abs() < 1e-12);
    let r = rouge_l_f1(&toks("sinus rhythm normal"), &toks("normal sinus rhythm"));
    assert!((r - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(rouge_l_f1(&toks(""), &toks("yes")), 0.0);
}

proptest! {
    #[test]
    fn scores_are_bounded_and_self_match_is_perfect(words in prop::collection::vec("[a-d]{1,3}", 1..6)) {
        let text = words.join(" ");
        let t = toks(&text);
        prop_assert_eq!(overlap_accuracy(&t, &t).unwrap(), 1.0);
        prop_assert_eq!(bleu1(&t, &t), 1.0);
        prop_assert_eq!(rouge_l_f1(&t, &t), 1.0);
    }

    #[test]
    fn lcs_is_symmetric_and_bounded(a in prop::collection::vec(0u8..3, 0..8), b in prop::collection::vec(0u8..3, 0..8)) {
        let sa: Vec<String> = a.iter().map(u8::to_string).collect();
        let sb: Vec<String> = b.iter().map(u8::to_string).collect();
        let l = lcs_len(&sa, &sb);
        prop_assert_eq!(l, lcs_len(&sb, &sa));
        prop_assert!(l <= a.len().min(b.len()));
        let f = rouge_l_f1(&sa, &sb);
        prop_assert!((0.0..=1.0).contains(&f));
        let p = bleu1(&sa, &sb);
        prop_assert!((0.0..=1.0).contains(&p));
    }
}
