//! Straightforward double-loop evaluation of the seven metrics.

use std::collections::{BTreeMap, BTreeSet, HashMap};

/// `(user, item, value)`.
pub type Triple = (String, String, f64);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleReport {
    pub coverage: f64,
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
    pub novelty: f64,
    pub diversity: Option<f64>,
    pub serendipity: f64,
}

impl OracleReport {
    pub fn values(&self) -> [Option<f64>; 7] {
        [
            Some(self.coverage),
            Some(self.precision),
            Some(self.recall),
            Some(self.ndcg),
            Some(self.novelty),
            self.diversity,
            Some(self.serendipity),
        ]
    }
}

/// Repeated (user, item) pairs: the last one wins.
fn dedup(rows: &[Triple]) -> Vec<Triple> {
    let mut last: BTreeMap<(&str, &str), f64> = BTreeMap::new();
    for (u, i, v) in rows {
        last.insert((u, i), *v);
    }
    last.into_iter()
        .map(|((u, i), v)| (u.to_owned(), i.to_owned(), v))
        .collect()
}

/// `1 / log2(pos + 1)` for a 1-based position.
pub fn discount(pos: usize) -> f64 {
    1.0 / ((pos + 1) as f64).log2()
}

/// Discounted gain of one list against a reference set, over the first k
/// positions.
pub fn dcg(list: &[String], reference: &BTreeSet<String>, k: usize) -> f64 {
    let mut sum = 0.0;
    for (idx, item) in list.iter().take(k).enumerate() {
        if reference.contains(item) {
            sum += discount(idx + 1);
        }
    }
    sum
}

pub fn ideal_dcg(k: usize) -> f64 {
    (1..=k).map(discount).sum()
}

/// Evaluates `recs` (user → ordered items) against a train/test pair.
/// Test users without a list are scored on an empty list.
pub fn evaluate(
    train: &[Triple],
    test: &[Triple],
    threshold: f64,
    k: usize,
    recs: &HashMap<String, Vec<String>>,
) -> OracleReport {
    let train = dedup(train);
    let test = dedup(test);

    let users: Vec<String> = train
        .iter()
        .map(|r| r.0.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let items: Vec<String> = train
        .iter()
        .map(|r| r.1.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let user_pos: HashMap<&str, usize> = users.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
    let item_pos: HashMap<&str, usize> = items.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();

    // dense item x user indicator of "liked in train"
    let mut liked = vec![vec![0.0f64; users.len()]; items.len()];
    let mut count = vec![0usize; items.len()];
    for (u, i, v) in &train {
        let ii = item_pos[i.as_str()];
        count[ii] += 1;
        if *v > threshold {
            liked[ii][user_pos[u.as_str()]] = 1.0;
        }
    }
    let freq = |item: &str| -> f64 {
        item_pos
            .get(item)
            .map(|&ii| count[ii] as f64 / train.len() as f64)
            .unwrap_or(0.0)
    };
    let cosine = |a: &str, b: &str| -> f64 {
        let (Some(&x), Some(&y)) = (item_pos.get(a), item_pos.get(b)) else {
            return 0.0;
        };
        let mut dot = 0.0;
        let mut nx = 0.0;
        let mut ny = 0.0;
        for u in 0..users.len() {
            dot += liked[x][u] * liked[y][u];
            nx += liked[x][u] * liked[x][u];
            ny += liked[y][u] * liked[y][u];
        }
        if nx == 0.0 || ny == 0.0 {
            0.0
        } else {
            dot / (nx.sqrt() * ny.sqrt())
        }
    };

    let mut ranked: Vec<usize> = (0..items.len()).collect();
    ranked.sort_by(|&a, &b| count[b].cmp(&count[a]).then(items[a].cmp(&items[b])));
    let popular: BTreeSet<&str> = ranked.iter().take(k).map(|&i| items[i].as_str()).collect();

    let test_users: BTreeSet<&str> = test.iter().map(|r| r.0.as_str()).collect();
    let mut reference: HashMap<&str, BTreeSet<String>> = HashMap::new();
    for (u, i, v) in &test {
        if *v > threshold {
            reference.entry(u.as_str()).or_default().insert(i.clone());
        }
    }
    let empty_ref = BTreeSet::new();
    let empty_list = Vec::new();

    let kf = k as f64;
    let idcg = ideal_dcg(k);
    let mut covered: BTreeSet<&str> = BTreeSet::new();
    let (mut p, mut r, mut n, mut nov, mut div, mut ser) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for user in &test_users {
        let full = recs.get(*user).unwrap_or(&empty_list);
        let list: Vec<String> = full.iter().take(k).cloned().collect();
        let refs = reference.get(user).unwrap_or(&empty_ref);

        let mut hits = 0usize;
        let mut unexpected = 0usize;
        for item in &list {
            if let Some((key, _)) = item_pos.get_key_value(item.as_str()) {
                covered.insert(key);
            }
            if refs.contains(item) {
                hits += 1;
                if !popular.contains(item.as_str()) {
                    unexpected += 1;
                }
            }
            let f = freq(item);
            if f > 0.0 {
                nov -= f.log2();
            }
        }
        p += hits as f64 / kf;
        if !refs.is_empty() {
            r += hits as f64 / refs.len() as f64;
        }
        n += dcg(&list, refs, k) / idcg;
        ser += unexpected as f64 / kf;
        if k >= 2 {
            let mut s = 0.0;
            for a in 0..list.len() {
                for b in a + 1..list.len() {
                    s += 1.0 - cosine(&list[a], &list[b]);
                }
            }
            div += s / (kf * (kf - 1.0));
        }
    }
    let nu = test_users.len() as f64;
    let mean = |x: f64| if nu == 0.0 { 0.0 } else { x / nu };
    OracleReport {
        coverage: covered.len() as f64 / items.len() as f64,
        precision: mean(p),
        recall: mean(r),
        ndcg: mean(n),
        novelty: mean(nov / kf),
        diversity: (k >= 2).then(|| mean(div)),
        serendipity: mean(ser),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(u: &str, i: &str, v: f64) -> Triple {
        (u.into(), i.into(), v)
    }

    #[test]
    fn dcg_of_hits_at_one_and_three() {
        let refs: BTreeSet<String> = ["a", "c"].iter().map(|s| s.to_string()).collect();
        let list: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        assert_eq!(dcg(&list, &refs, 3), 1.5);
    }

    #[test]
    fn hand_worked_metrics() {
        // freq: x 2/4, y 1/4, z 1/4; popular top-2 = [x, y]
        let train = [t("a", "x", 5.0), t("b", "x", 4.0), t("a", "y", 4.0), t("b", "z", 5.0)];
        let test = [t("a", "z", 5.0), t("b", "y", 1.0)];
        let recs = HashMap::from([
            ("a".to_string(), vec!["z".to_string(), "q".to_string()]),
            ("b".to_string(), vec!["y".to_string()]),
        ]);
        let m = evaluate(&train, &test, 3.0, 2, &recs);
        assert_eq!(m.coverage, 2.0 / 3.0);
        assert_eq!(m.precision, 0.25);
        assert_eq!(m.recall, 0.5);
        assert_eq!(m.ndcg, 0.5 / (1.0 + discount(2)));
        // a: -log2(1/4) = 2, q unseen; b: 2 -> (2/2 + 2/2) / 2
        assert_eq!(m.novelty, 1.0);
        // a: z-q pair, q has no likers -> 1/2; b: no pairs
        assert_eq!(m.diversity, Some(0.25));
        assert_eq!(m.serendipity, 0.25);
    }
}
