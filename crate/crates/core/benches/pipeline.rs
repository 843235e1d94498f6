use std::fs;
use std::path::Path;

use analytika::archive::{enumerate_dex, ArchiveIndex};
use analytika::corpus::CorpusEntry;
use analytika::dex::{parse_dex, FixtureDex, MethodRef};
use analytika::exec::{default_workers, map_items, ExecMode};
use analytika::pipeline::{AnalysisConfig, Analyzer};
use analytika::testkit::ApkBuilder;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

fn fixture_corpus(n: usize) -> Vec<Vec<u8>> {
    (0..n)
        .map(|i| {
            let pkg = format!("com.bench.app{i}");
            let mut dex = FixtureDex::new();
            for c in 0..40 {
                let targets = (0..10)
                    .map(|k| match (c + k) % 5 {
                        0 => MethodRef::new("android.media.MediaDrm", "openSession"),
                        1 => MethodRef::with_shorty("javax.crypto.Cipher", "getInstance", "LL"),
                        2 => MethodRef::new("android.security.keystore.KeyInfo", "isInsideSecureHardware"),
                        _ => MethodRef::with_shorty(&format!("{pkg}.util.Helper{k}"), "run", "VIJL"),
                    })
                    .collect();
                dex = dex.class(&format!("{pkg}.ui.Screen{c}"), targets);
            }
            ApkBuilder::new(&pkg).dex(dex).build()
        })
        .collect()
}

fn real_dex_units() -> Vec<(String, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/real");
    let mut units = Vec::new();
    let mut paths: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    paths.sort();
    for p in paths.into_iter().filter(|p| p.extension().is_some_and(|e| e == "apk")) {
        let bytes = fs::read(&p).unwrap();
        let index = ArchiveIndex::open(&bytes).unwrap();
        for name in enumerate_dex(&index) {
            units.push((name.clone(), index.read_entry(&name).unwrap()));
        }
    }
    units
}

fn modes() -> [(&'static str, ExecMode); 2] {
    [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)]
}

fn bench_analysis(c: &mut Criterion) {
    let corpus = fixture_corpus(64);
    let out = tempfile::tempdir().unwrap();
    let analyzer = Analyzer::from_config(AnalysisConfig::new(out.path())).unwrap();
    let entry = CorpusEntry::local("bench.apk");
    let workers = default_workers().max(2);
    let mut group = c.benchmark_group("analyze_fixture_corpus");
    group.throughput(Throughput::Elements(corpus.len() as u64));
    for (name, mode) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| map_items(&corpus, mode, workers, |apk| analyzer.analyze_apk(apk, &entry).matches.len()))
        });
    }
    group.finish();
}

fn bench_real_dex(c: &mut Criterion) {
    let units = real_dex_units();
    let workers = default_workers().max(2);
    let mut group = c.benchmark_group("parse_real_dex");
    group.throughput(Throughput::Bytes(units.iter().map(|(_, b)| b.len() as u64).sum()));
    for (name, mode) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| map_items(&units, mode, workers, |(n, bytes)| parse_dex(bytes, n).unwrap().invocations.len()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_analysis, bench_real_dex);
criterion_main!(benches);
