mod common;

use common::{random_vec, rng, small_model};
use mate::data::Sample;
use mate::evalkit::{
    average_precision, cmc, embeddings_csv, extract_features, mean_ap, parse_embeddings, rank, FeatureTable, RankedList,
};
use ndarray::Array2;
use rand::Rng;

fn table(ids: Vec<u64>, cameras: Vec<usize>, gids: Vec<u64>, rows: Vec<Vec<f64>>) -> FeatureTable {
    let dim = rows[0].len();
    FeatureTable {
        ids,
        cameras,
        global_ids: gids.into_iter().map(Some).collect(),
        features: Array2::from_shape_vec((rows.len(), dim), rows.concat()).unwrap(),
    }
}

fn list_with_hits(positions: &[usize], len: usize) -> RankedList {
    RankedList {
        query_id: 0,
        gallery_ids: (1..=len as u64).collect(),
        relevant: (1..=len).map(|i| positions.contains(&i)).collect(),
    }
}

#[test]
fn ranking_matches_quadratic_reference_sort() {
    let mut r = rng(41);
    for _ in 0..50 {
        let rows: Vec<Vec<f64>> = (0..5).map(|_| random_vec(&mut r, 3)).collect();
        let gallery = table(vec![5, 3, 9, 1, 7], vec![2; 5], vec![1, 2, 1, 3, 2], rows.clone());
        let query = table(vec![100], vec![1], vec![1], vec![random_vec(&mut r, 3)]);
        let got = rank(query.entry(0), &gallery).unwrap().unwrap();

        let dist =
            |i: usize| -> f64 { (0..3).map(|j| (rows[i][j] - query.features[[0, j]]).powi(2)).sum::<f64>().sqrt() };
        // Selection sort by (distance, id).
        let mut remaining: Vec<usize> = (0..5).collect();
        let mut want = Vec::new();
        while !remaining.is_empty() {
            let mut best = 0;
            for c in 1..remaining.len() {
                let (a, b) = (remaining[c], remaining[best]);
                if dist(a) < dist(b) || (dist(a) == dist(b) && gallery.ids[a] < gallery.ids[b]) {
                    best = c;
                }
            }
            want.push(gallery.ids[remaining.remove(best)]);
        }
        assert_eq!(got.gallery_ids, want);
        let rel: Vec<bool> = want.iter().map(|id| [5, 9].contains(id)).collect();
        assert_eq!(got.relevant, rel);
    }
}

#[test]
fn same_camera_same_person_is_excluded() {
    let gallery = table(vec![1, 2, 3], vec![1, 2, 1], vec![7, 7, 8], vec![vec![0.0], vec![1.0], vec![2.0]]);
    let query = table(vec![10], vec![1], vec![7], vec![vec![0.0]]);
    let got = rank(query.entry(0), &gallery).unwrap().unwrap();
    assert_eq!(got.gallery_ids, vec![2, 3]);
    let lonely = table(vec![11], vec![1], vec![8], vec![vec![0.0]]);
    assert!(rank(lonely.entry(0), &table(vec![3], vec![1], vec![8], vec![vec![2.0]])).unwrap().is_none());
}

#[test]
fn cmc_hand_count() {
    let lists: Vec<RankedList> = [1, 1, 2, 5].iter().map(|&h| list_with_hits(&[h], 6)).collect();
    assert_eq!(cmc(&lists, 3), vec![0.5, 0.75, 0.75]);
}

fn brute_force_ap(relevant: &[bool]) -> f64 {
    let hits: Vec<usize> = (0..relevant.len()).filter(|&i| relevant[i]).collect();
    let mut sum = 0.0;
    for &h in &hits {
        let upto = relevant[..=h].iter().filter(|&&r| r).count();
        sum += upto as f64 / (h + 1) as f64;
    }
    sum / hits.len() as f64
}

#[test]
fn average_precision_hand_value_and_brute_force() {
    let l = list_with_hits(&[1, 3], 5);
    assert!((average_precision(&l) - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    let mut r = rng(42);
    for _ in 0..100 {
        let mut relevant: Vec<bool> = (0..10).map(|_| r.random_bool(0.3)).collect();
        relevant[r.random_range(0..10)] = true;
        let l = RankedList { query_id: 0, gallery_ids: (0..10).collect(), relevant: relevant.clone() };
        assert!((average_precision(&l) - brute_force_ap(&relevant)).abs() < 1e-12);
    }
    let lists = vec![list_with_hits(&[1], 3), list_with_hits(&[2], 3)];
    assert!((mean_ap(&lists) - 0.75).abs() < 1e-12);
}

#[test]
fn batch_extraction_matches_per_sample_encoding() {
    let mut r = rng(43);
    let params = small_model(&mut r, 4, 5, 3, &[2]);
    let samples: Vec<Sample> = (0..12)
        .map(|i| Sample {
            id: i,
            camera: 1 + (i as usize % 2),
            label: 1,
            global_id: Some(i % 3),
            x: random_vec(&mut r, 4),
        })
        .collect();
    let t = extract_features(&params, &samples).unwrap();
    for (i, s) in samples.iter().enumerate() {
        let f = params.encode(&s.x).unwrap();
        for (a, b) in t.features.row(i).iter().zip(&f) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn embedding_dump_round_trips() {
    let mut r = rng(44);
    let rows: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut r, 3)).collect();
    let mut t = table(vec![1, 2, 3, 4], vec![1, 2, 1, 2], vec![5, 5, 6, 6], rows);
    t.global_ids[2] = None;
    let back = parse_embeddings(&embeddings_csv(&t)).unwrap();
    assert_eq!(back, t);
}
