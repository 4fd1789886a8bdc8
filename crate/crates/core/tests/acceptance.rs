mod common;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fewshot_ner::corpus::{
    compute_tag_set, span_counts, to_io, to_spans, TagLabel, TagScheme, TaggedSentence,
};
use fewshot_ner::decode::{viterbi, DecodingConfig};
use fewshot_ner::embed::hash_featurize;
use fewshot_ner::experiment::run_predict;
use fewshot_ner::knn::{emission_rows, nnshot_predict, SupportIndex};
use fewshot_ner::metrics::{aggregate, span_micro_f1, EvalReport, Score};
use fewshot_ner::sampler::greedy_sample;
use fewshot_ner::transitions::{
    apply_temperature, count_abstract, estimate_abstract, expand, ExpandedTransitions,
    Normalization,
};
use rand::seq::IndexedRandom;
use rand::Rng;

use common::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn viterbi_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = rng(101);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let n = rng.random_range(1..=4);
        let len = rng.random_range(1..=5);
        let trans = random_matrix(&mut rng, n);
        let emissions = random_emissions(&mut rng, &trans, len);
        let got = viterbi(&emissions, &trans).map_err(|e| e.to_string())?;
        let (path, score) = brute_force_decode(&emissions, &trans);
        ensure(got.states == path, || {
            format!("case {case}: path {:?}, enumeration {:?}", got.states, path)
        })?;
        worst = worst.max((got.log_score - score).abs());
        ensure(worst <= 1e-9, || format!("case {case}: score off by {worst:e}"))?;
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("200 instances, max score error {worst:.1e}, {elapsed:.2?}"))
}

fn uniform_reduction() -> Outcome {
    let mut rng = rng(202);
    let mut tokens = 0;
    for case in 0..100 {
        let n = rng.random_range(1..=4);
        let classes = class_names(n);
        let dim = rng.random_range(2..=16);
        let mut labels = vec![TagLabel::Outside];
        labels.extend(classes.iter().map(|c| TagLabel::Inside(c.clone())));
        let entries: Vec<(Vec<f64>, TagLabel)> = (0..rng.random_range(labels.len()..=3 * labels.len()))
            .enumerate()
            .map(|(i, _)| {
                let tag = if i < labels.len() {
                    labels[i].clone()
                } else {
                    labels.choose(&mut rng).unwrap().clone()
                };
                (random_unit(&mut rng, dim), tag)
            })
            .collect();
        let index = SupportIndex::build(entries.iter().map(|(v, t)| (v.as_slice(), t)), &classes)
            .map_err(|e| e.to_string())?;
        let len = rng.random_range(1..=10);
        let queries: Vec<Vec<f64>> = (0..len).map(|_| random_unit(&mut rng, dim)).collect();
        let rows = emission_rows(queries.iter().map(Vec::as_slice), &index).map_err(|e| e.to_string())?;
        let uniform = ExpandedTransitions::uniform(classes).map_err(|e| e.to_string())?;
        let decoded = viterbi(&rows, &uniform).map_err(|e| e.to_string())?.tags;
        let nearest = nnshot_predict(queries.iter().map(Vec::as_slice), &index).map_err(|e| e.to_string())?;
        ensure(decoded == nearest, || {
            format!("case {case}: viterbi {decoded:?} vs nearest {nearest:?}")
        })?;
        tokens += len;
    }
    Ok(format!("100 instances, {tokens} tokens identical"))
}

fn row_stochasticity() -> Outcome {
    let mut rng = rng(303);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let source_classes = class_names(rng.random_range(1..=5));
        let size = rng.random_range(1..=40);
        let corpus = random_io_corpus(&mut rng, &source_classes, size);
        let counts = count_abstract(&corpus).map_err(|e| e.to_string())?;
        let abs = estimate_abstract(&counts, Normalization::default()).map_err(|e| e.to_string())?;
        for n in 1..=6 {
            let m = expand(&abs, &class_names(n)).map_err(|e| e.to_string())?;
            for (r, row) in m.rows().enumerate() {
                let dev = (row.iter().sum::<f64>() - 1.0).abs();
                worst = worst.max(dev);
                ensure(dev <= 1e-9, || format!("case {case}, N={n}, row {r}: sum off by {dev:e}"))?;
            }
        }
    }
    Ok(format!("100 corpora x N=1..6, max row-sum error {worst:.1e}"))
}

fn temperature() -> Outcome {
    let mut rng = rng(404);
    let argmax = |row: &[f64]| {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    };
    let mut rows_checked = 0;
    while rows_checked < 100 {
        let n = rng.random_range(1..=4);
        let m = random_matrix(&mut rng, n);
        let tau = rng.random_range(0.01..5.0);
        let t = apply_temperature(&m, tau).map_err(|e| e.to_string())?;
        for (before, after) in m.rows().zip(t.rows()) {
            ensure(argmax(before) == argmax(after), || {
                format!("tau {tau}: argmax moved in {before:?} -> {after:?}")
            })?;
            rows_checked += 1;
        }
    }

    let mut worst_flat = 0.0f64;
    let mut worst_identity = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(1..=4);
        let m = random_matrix(&mut rng, n);
        let cold = apply_temperature(&m, 1e-6).map_err(|e| e.to_string())?;
        for (before, after) in m.rows().zip(cold.rows()) {
            if before.iter().all(|&p| p > 0.0) {
                let u = 1.0 / before.len() as f64;
                for &p in after {
                    worst_flat = worst_flat.max((p - u).abs());
                }
            }
        }
        let same = apply_temperature(&m, 1.0).map_err(|e| e.to_string())?;
        for (before, after) in m.rows().zip(same.rows()) {
            for (a, b) in before.iter().zip(after) {
                worst_identity = worst_identity.max((a - b).abs());
            }
        }
    }
    ensure(worst_flat <= 1e-5, || format!("tau=1e-6 off uniform by {worst_flat:e}"))?;
    ensure(worst_identity <= 1e-12, || format!("tau=1 changed entries by {worst_identity:e}"))?;
    Ok(format!(
        "{rows_checked} rows keep argmax; tau=1e-6 within {worst_flat:.1e} of uniform; tau=1 within {worst_identity:.1e}"
    ))
}

fn sampler_guarantees() -> Outcome {
    let mut rng = rng(505);
    let mut supports = 0;
    for case in 0..50 {
        let classes = class_names(rng.random_range(1..=5));
        let size = rng.random_range(1..=60);
        let pool = random_io_corpus(&mut rng, &classes, size);
        let availability: BTreeMap<String, usize> = compute_tag_set(&pool).frequencies().clone();
        for k in [1, 5] {
            let seed = rng.random();
            let support = greedy_sample(&pool, k, seed).map_err(|e| e.to_string())?;
            for (class, &avail) in &availability {
                let got = support.count(class);
                ensure(got >= k.min(avail), || {
                    format!("case {case}, k={k}: {class} has {got} of min({k}, {avail})")
                })?;
            }
            let mut ids = support.source_ids().to_vec();
            ids.sort_unstable();
            ids.dedup();
            ensure(ids.len() == support.len(), || format!("case {case}: repeated sentence"))?;

            // Classes by ascending frequency, ties by name.
            let mut expected: Vec<(&usize, &String)> = availability.iter().map(|(c, n)| (n, c)).collect();
            expected.sort();
            let expected: Vec<&String> = expected.into_iter().map(|(_, c)| c).collect();
            ensure(support.class_order().iter().collect::<Vec<_>>() == expected, || {
                format!("case {case}: class order {:?}", support.class_order())
            })?;
            let positions: Vec<usize> = support
                .draws()
                .iter()
                .map(|d| expected.iter().position(|c| **c == d.class).unwrap())
                .collect();
            ensure(positions.windows(2).all(|w| w[0] <= w[1]), || {
                format!("case {case}: draws out of order {positions:?}")
            })?;

            let again = greedy_sample(&pool, k, seed).map_err(|e| e.to_string())?;
            ensure(again == support, || format!("case {case}: same seed, different support"))?;
            supports += 1;
        }
    }
    Ok(format!("{supports} support sets checked"))
}

fn self_retrieval() -> Outcome {
    let mut rng = rng(606);
    let classes = class_names(3);
    let corpus: Vec<TaggedSentence> = (0..40)
        .map(|s| {
            let len = rng.random_range(2..=10);
            let base = random_io(&mut rng, &classes, len, 0.4);
            let tokens = (0..base.len()).map(|t| format!("tok{s}x{t}")).collect();
            TaggedSentence::new(tokens, base.tags().to_vec(), TagScheme::Io).unwrap()
        })
        .collect();
    let table = hash_featurize(&corpus, 256, 2).map_err(|e| e.to_string())?;
    let mut entries = Vec::new();
    for (s, sentence) in corpus.iter().enumerate() {
        for (t, tag) in sentence.tags().iter().enumerate() {
            entries.push((table.vector(s, t), tag));
        }
    }
    let present = compute_tag_set(&corpus).classes().to_vec();
    let index = SupportIndex::build(entries, &present).map_err(|e| e.to_string())?;
    let pred = (0..corpus.len())
        .map(|s| nnshot_predict(table.sentence(s), &index))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let report = span_micro_f1(&corpus, &pred).map_err(|e| e.to_string())?;
    ensure(report.micro.f1 == 1.0, || format!("F1 = {}", report.micro.f1))?;
    Ok(format!("F1 = 1 over {} gold spans", report.micro.gold))
}

fn separable_synthetic() -> Outcome {
    let started = Instant::now();
    let mut rng = rng(707);
    // Every class, O included, draws its words from one stem.
    let vocab: [(&str, [&str; 4]); 3] = [
        ("PER", ["zorvexalunda", "zorvexalundi", "zorvexalundo", "zorvexalundu"]),
        ("LOC", ["quandilbertk", "quandilbertm", "quandilbertp", "quandilbertt"]),
        ("ORG", ["jumbrathcofw", "jumbrathcofy", "jumbrathcofz", "jumbrathcofq"]),
    ];
    let filler = [
        "plenthoma", "plenthomb", "plenthomc", "plenthomd", "plenthomf", "plenthomg",
        "plenthomh", "plenthomj",
    ];
    let corpus: Vec<TaggedSentence> = (0..200)
        .map(|_| {
            let len = rng.random_range(4..=10);
            let mut tokens = Vec::new();
            let mut tags = Vec::new();
            for _ in 0..len {
                if rng.random_bool(0.3) {
                    let (class, words) = vocab.choose(&mut rng).unwrap();
                    tokens.push(words.choose(&mut rng).unwrap().to_string());
                    tags.push(TagLabel::Inside(class.to_string()));
                } else {
                    tokens.push(filler.choose(&mut rng).unwrap().to_string());
                    tags.push(TagLabel::Outside);
                }
            }
            TaggedSentence::new(tokens, tags, TagScheme::Io).unwrap()
        })
        .collect();
    let table = hash_featurize(&corpus, 256, 2).map_err(|e| e.to_string())?;
    let support = greedy_sample(&corpus, 5, 7).map_err(|e| e.to_string())?;
    let rest: Vec<usize> = (0..corpus.len())
        .filter(|i| !support.source_ids().contains(i))
        .collect();
    let test: Vec<TaggedSentence> = rest.iter().map(|&i| corpus[i].clone()).collect();
    let decoding = DecodingConfig::new(1.0, false).map_err(|e| e.to_string())?;
    let pred = run_predict(&support, &table, &test, &table.select(&rest), None, &decoding)
        .map_err(|e| e.to_string())?;
    let report = span_micro_f1(&test, &pred).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    ensure(report.micro.f1 >= 0.95, || format!("F1 = {:.4}", report.micro.f1))?;
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "F1 = {:.4} on {} test sentences ({} support), {elapsed:.2?}",
        report.micro.f1,
        test.len(),
        support.len()
    ))
}

fn f1_oracle() -> Outcome {
    let gold = io_sentence(vec![
        TagLabel::Outside,
        TagLabel::Inside("PER".into()),
        TagLabel::Inside("PER".into()),
        TagLabel::Outside,
        TagLabel::Inside("LOC".into()),
    ]);
    let pred = vec![
        TagLabel::Outside,
        TagLabel::Inside("PER".into()),
        TagLabel::Outside,
        TagLabel::Outside,
        TagLabel::Inside("LOC".into()),
    ];
    // Gold spans {PER 1-2, LOC 4}, predicted {PER 1, LOC 4}: one of two correct.
    let r = span_micro_f1(&[gold], &[pred]).map_err(|e| e.to_string())?;
    let m = r.micro;
    ensure(m.precision == 0.5 && m.recall == 0.5 && m.f1 == 0.5, || format!("{m:?}"))?;

    let runs = [0.1, 0.2, 0.3].map(|f1| EvalReport {
        micro: Score {
            f1,
            ..Score::default()
        },
        per_class: BTreeMap::new(),
    });
    let agg = aggregate(runs.to_vec()).map_err(|e| e.to_string())?;
    // mean 0.6/3; deviations -0.1, 0, 0.1 give 0.02/(3-1) = 0.01.
    ensure((agg.mean_f1 - 0.2).abs() < 1e-12 && (agg.std_f1 - 0.1).abs() < 1e-12, || {
        format!("mean {} std {}", agg.mean_f1, agg.std_f1)
    })?;
    Ok("P = R = F1 = 0.5; mean 0.2, std 0.1".into())
}

fn scheme_property() -> Outcome {
    let mut rng = rng(909);
    let mut spans = 0;
    for case in 0..200 {
        let classes = class_names(rng.random_range(1..=4));
        let len = rng.random_range(1..=15);
        let s = random_bio(&mut rng, &classes, len, true);
        let direct = to_spans(&s);
        let via_io = to_spans(&to_io(&s));
        ensure(direct == via_io, || format!("case {case}: {direct:?} vs {via_io:?}"))?;
        spans += direct.len();
    }
    Ok(format!("200 sentences, {spans} spans preserved"))
}

fn count_conservation() -> Outcome {
    let mut rng = rng(1010);
    for case in 0..50 {
        let classes = class_names(rng.random_range(1..=5));
        let size = rng.random_range(1..=50);
        let corpus = random_io_corpus(&mut rng, &classes, size);
        let counts = count_abstract(&corpus).map_err(|e| e.to_string())?;
        let expected: u64 = corpus.iter().map(|s| s.len() as u64 + 1).sum();
        ensure(counts.total() == expected, || {
            format!("case {case}: {} counted, {expected} expected", counts.total())
        })?;
        let spans: usize = corpus.iter().flat_map(|s| span_counts(s).into_values()).sum();
        ensure(spans == corpus.iter().map(|s| to_spans(s).len()).sum::<usize>(), || {
            format!("case {case}: span tally mismatch")
        })?;
    }
    Ok("50 corpora".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("viterbi matches exhaustive search", viterbi_oracle),
        ("uniform transitions reduce to nearest neighbor", uniform_reduction),
        ("expanded rows are distributions", row_stochasticity),
        ("temperature properties", temperature),
        ("sampler guarantees", sampler_guarantees),
        ("self-retrieval F1", self_retrieval),
        ("separable synthetic F1 >= 0.95", separable_synthetic),
        ("span F1 and aggregation oracle", f1_oracle),
        ("IO conversion preserves spans", scheme_property),
        ("transition count conservation", count_conservation),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
