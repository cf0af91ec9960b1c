//! Repeated-measures Tukey comparisons and pairwise rank statistics on toy data.

use cordwarp::stats::{paired_tukey, pairwise_rank_logistic, rank_csv, tukey_csv, PairedSamples, RankingRecord};

fn main() -> cordwarp::Result<()> {
    let conditions = vec!["uncorrected".to_string(), "a".into(), "b".into()];
    let subjects: Vec<String> = (1..=6).map(|i| format!("sub-{i:02}")).collect();
    let values = (0..6)
        .map(|i| {
            let s = i as f64 * 0.7;
            vec![10.0 + s, 7.5 + s + 0.2 * (i % 2) as f64, 9.8 + s - 0.1 * (i % 3) as f64]
        })
        .collect();
    let t = paired_tukey(&PairedSamples::new(conditions, subjects.clone(), values)?, "uncorrected")?;
    print!("{}", tukey_csv(&[("mad_deg".into(), t)]));

    let records: Vec<RankingRecord> = (0..3)
        .flat_map(|r| {
            subjects.iter().enumerate().map(move |(i, s)| RankingRecord {
                rater: format!("rater{r}"),
                subject: s.clone(),
                ranking: if (i + r) % 4 == 0 { vec!["b".into(), "a".into()] } else { vec!["a".into(), "b".into()] },
            })
        })
        .collect();
    print!("{}", rank_csv(&pairwise_rank_logistic(&records)?));
    Ok(())
}
