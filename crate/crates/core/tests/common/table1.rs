use ood_audit::metrics::MetricRow;
use ood_audit::report::Mark;

// Reference benchmark values: per method, per setting [ACC, near AUROC, near FPR95, far AUROC, far FPR95].
pub const TABLE1: [(&str, [[f64; 5]; 7]); 7] = [
    (
        "DivideMix",
        [
            [96.1, 81.6, 62.1, 69.7, 64.1],
            [94.6, 82.4, 51.1, 77.2, 51.2],
            [93.2, 81.2, 64.7, 77.9, 67.0],
            [76.0, 54.8, 93.7, 49.2, 93.1],
            [93.4, 76.4, 72.7, 49.2, 93.1],
            [77.3, 77.9, 80.6, 63.1, 91.5],
            [75.6, 76.8, 80.7, 60.4, 92.1],
        ],
    ),
    (
        "LongReMix",
        [
            [96.3, 79.5, 63.0, 70.8, 64.9],
            [95.1, 80.2, 51.9, 67.6, 58.6],
            [93.8, 76.8, 58.9, 62.6, 62.5],
            [79.9, 73.7, 82.5, 59.3, 88.0],
            [94.7, 77.5, 72.1, 70.5, 68.6],
            [77.9, 77.1, 78.8, 64.2, 90.0],
            [75.5, 76.2, 81.3, 72.5, 85.7],
        ],
    ),
    (
        "L2B",
        [
            [92.1, 76.0, 62.9, 74.7, 61.3],
            [88.4, 72.3, 73.2, 75.5, 64.9],
            [71.4, 67.5, 89.6, 69.9, 86.6],
            [50.6, 61.6, 91.2, 60.2, 83.9],
            [91.9, 75.3, 68.1, 78.9, 66.4],
            [68.8, 71.1, 86.9, 69.9, 87.7],
            [58.4, 68.4, 88.0, 60.3, 93.7],
        ],
    ),
    (
        "PSSCL",
        [
            [96.4, 91.3, 35.8, 93.4, 24.0],
            [95.6, 90.7, 35.8, 92.3, 26.4],
            [93.7, 83.3, 41.7, 87.8, 31.1],
            [92.9, 65.6, 89.6, 64.2, 85.7],
            [93.9, 90.6, 39.7, 87.5, 33.8],
            [77.6, 70.5, 87.9, 66.1, 79.5],
            [77.0, 77.4, 76.5, 73.2, 73.5],
        ],
    ),
    (
        "UNICON",
        [
            [95.1, 82.5, 48.1, 84.7, 38.4],
            [93.7, 81.6, 46.2, 92.9, 19.9],
            [92.1, 83.0, 47.6, 83.9, 35.3],
            [90.8, 84.1, 57.5, 92.8, 32.0],
            [91.7, 83.1, 44.3, 82.5, 33.9],
            [78.9, 77.5, 78.6, 76.2, 67.9],
            [77.6, 75.7, 80.5, 76.1, 71.3],
        ],
    ),
    (
        "RRL",
        [
            [95.9, 54.2, 92.5, 66.3, 84.9],
            [93.9, 48.3, 98.6, 51.1, 98.8],
            [83.4, 39.3, 97.0, 30.8, 99.1],
            [87.6, 49.9, 96.0, 61.3, 85.6],
            [93.7, 46.2, 95.4, 41.7, 98.0],
            [79.5, 52.5, 92.3, 55.7, 97.5],
            [74.6, 47.8, 96.1, 56.6, 96.4],
        ],
    ),
    (
        "ProMix",
        [
            [97.6, 88.1, 37.5, 76.6, 45.6],
            [97.3, 87.2, 38.4, 82.0, 36.0],
            [94.0, 87.4, 41.6, 79.4, 40.5],
            [92.8, 83.0, 51.2, 82.0, 41.7],
            [93.9, 85.5, 40.6, 81.2, 39.2],
            [82.6, 73.3, 80.2, 51.9, 93.8],
            [79.3, 76.1, 81.5, 63.9, 90.9],
        ],
    ),
];

// Reference emphasis for the same cells: B bold, U underline, . none.
pub const TABLE1_MARKS: [(&str, [&str; 7]); 7] = [
    ("DivideMix", [".....", ".....", ".....", ".....", ".....", ".B...", ".U..."]),
    ("LongReMix", [".....", ".....", ".....", ".....", ".....", "..U..", "...U."]),
    ("L2B", [".....", ".....", ".....", ".....", ".....", ".....", "....."]),
    ("PSSCL", [".BBBU", ".BBU.", "...UU", ".....", ".BBUU", "...U.", ".BBU."]),
    ("UNICON", ["...U.", "...BU", ".....", ".U.BU", ".....", "UU.BB", "U..BB"]),
    ("RRL", [".....", ".....", ".....", ".....", ".....", "B....", "....."]),
    ("ProMix", ["BUU..", "BUU..", "BBU..", "..U..", ".UU..", "B....", "B...."]),
];

/// Reference marking: sort the distinct displayed values, bold every cell at
/// the best one, underline the runner-up only when both are held by one cell.
pub fn oracle_marks(values: &[f64], higher: bool) -> Vec<char> {
    let shown: Vec<i64> = values.iter().map(|v| (v * 10.0).round() as i64).collect();
    let mut distinct = shown.clone();
    distinct.sort();
    distinct.dedup();
    if higher {
        distinct.reverse();
    }
    let count = |k: i64| shown.iter().filter(|&&s| s == k).count();
    shown
        .iter()
        .map(|&s| {
            if s == distinct[0] {
                'B'
            } else if distinct.len() > 1 && s == distinct[1] && count(distinct[0]) == 1 && count(distinct[1]) == 1 {
                'U'
            } else {
                '.'
            }
        })
        .collect()
}

pub fn mark_char(m: Mark) -> char {
    match m {
        Mark::Bold => 'B',
        Mark::Underline => 'U',
        Mark::None => '.',
    }
}

/// Far AUROC before and after repair, with the reported accuracy change.
pub const PAIRED: [(&str, f64, f64, f64, f64); 4] = [
    ("sym 0.2", 93.4, 95.8, 96.4, 0.8),
    ("sym 0.5", 92.3, 95.9, 95.6, 0.7),
    ("sym 0.8", 87.8, 91.0, 93.7, 2.2),
    ("asym 0.4", 87.5, 93.7, 93.9, 0.5),
];

pub fn paired_fixture() -> (Vec<MetricRow>, Vec<MetricRow>) {
    let make = |method: &str, far: f64, acc: f64, noise: &str| {
        let mut r = MetricRow::new(method, "CIFAR-10", noise, "energy");
        r.far_auroc = Some(far);
        r.acc = Some(acc);
        r
    };
    let base = PAIRED.iter().map(|&(n, bl, _, acc, _)| make("PSSCL", bl, acc, n)).collect();
    let rep = PAIRED.iter().map(|&(n, _, vmr, acc, d)| make("PSSCL+VMR", vmr, acc + d, n)).collect();
    (base, rep)
}
