//! Rating ingestion and preprocessing.
//!
//! The pipeline turns a raw rating file into the centred, row-clipped sparse
//! matrix the solvers consume:
//!
//! 1. [`parse_ratings`] reindexes raw user/item IDs densely in order of first
//!    appearance.
//! 2. [`rescale_ratings`] maps the rating scale affinely (e.g. `[-10, 10]` to
//!    `[0, 5]`).
//! 3. [`split_train_test`] holds out a uniformly random fraction of all
//!    ratings. This runs *before* subsampling, so held-out ratings are never
//!    training candidates.
//! 4. [`subsample_per_user`] keeps at most `xi` training ratings per user.
//! 5. [`center_per_user`] subtracts each user's training mean.
//! 6. [`clip_rows`] scales every row into the ball of radius `L`.
//!
//! The row bound comes from the public schema only: a centred row with at
//! most `xi` entries from a scale of width `w` has norm at most
//! `(w / 2) * sqrt(xi)` ([`schema_row_bound`]).

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{SparseRow, SparseRows};
use crate::privacy::{AlgoTag, Purpose, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatingFormat {
    /// `user,item,rating[,timestamp]`, optional single header line.
    #[serde(alias = "csv")]
    CsvComma,
    /// `user::item::rating::timestamp`.
    #[serde(alias = "dat")]
    DoubleColon,
}

impl std::str::FromStr for RatingFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" | "csv_comma" | "csv-comma" => Ok(RatingFormat::CsvComma),
            "double_colon" | "double-colon" | "dat" => Ok(RatingFormat::DoubleColon),
            other => Err(Error::invalid(format!("unknown rating format '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rating {
    pub user: usize,
    pub item: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatingsDataset {
    pub num_users: usize,
    pub num_items: usize,
    pub ratings: Vec<Rating>,
    pub rating_lo: f64,
    pub rating_hi: f64,
    /// Raw ID of each dense user index.
    pub user_ids: Vec<String>,
    /// Raw ID of each dense item index.
    pub item_ids: Vec<String>,
}

impl RatingsDataset {
    /// Builds a dataset from dense-index triplets, checking every invariant.
    pub fn from_ratings(
        num_users: usize,
        num_items: usize,
        ratings: Vec<Rating>,
        rating_lo: f64,
        rating_hi: f64,
    ) -> Result<Self> {
        let mut seen = HashSet::with_capacity(ratings.len());
        for r in &ratings {
            if r.user >= num_users || r.item >= num_items {
                return Err(Error::OutOfRange(format!(
                    "({}, {}) outside {num_users} x {num_items}",
                    r.user, r.item
                )));
            }
            if !(r.value >= rating_lo && r.value <= rating_hi) {
                return Err(Error::OutOfRange(format!(
                    "rating {} outside [{rating_lo}, {rating_hi}]",
                    r.value
                )));
            }
            if !seen.insert((r.user, r.item)) {
                return Err(Error::DuplicatePair {
                    user: r.user.to_string(),
                    item: r.item.to_string(),
                });
            }
        }
        Ok(RatingsDataset {
            num_users,
            num_items,
            ratings,
            rating_lo,
            rating_hi,
            user_ids: (0..num_users).map(|i| i.to_string()).collect(),
            item_ids: (0..num_items).map(|i| i.to_string()).collect(),
        })
    }

    /// Declares the rating scale, e.g. `[0.5, 5]` for MovieLens, instead of
    /// the observed range assumed by [`parse_ratings`].
    pub fn with_scale(mut self, lo: f64, hi: f64) -> Result<Self> {
        if !(hi > lo) {
            return Err(Error::invalid(format!("empty rating scale [{lo}, {hi}]")));
        }
        if let Some(r) = self.ratings.iter().find(|r| r.value < lo || r.value > hi) {
            return Err(Error::OutOfRange(format!(
                "rating {} outside declared scale [{lo}, {hi}]",
                r.value
            )));
        }
        self.rating_lo = lo;
        self.rating_hi = hi;
        Ok(self)
    }

    fn with_ratings(&self, ratings: Vec<Rating>) -> Self {
        RatingsDataset {
            ratings,
            ..self.clone()
        }
    }
}

fn split_fields(line: &str, format: RatingFormat) -> Vec<&str> {
    match format {
        RatingFormat::CsvComma => line.split(',').map(str::trim).collect(),
        RatingFormat::DoubleColon => line.split("::").map(str::trim).collect(),
    }
}

/// Parses a rating file. The rating scale defaults to the observed
/// `[min, max]`; use [`RatingsDataset::with_scale`] to declare it.
pub fn parse_ratings<R: BufRead>(source: R, format: RatingFormat) -> Result<RatingsDataset> {
    let mut users: HashMap<String, usize> = HashMap::new();
    let mut items: HashMap<String, usize> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut ratings = Vec::new();
    let mut seen = HashSet::new();
    let mut first_content_line = true;

    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields = split_fields(trimmed, format);
        let is_first = std::mem::replace(&mut first_content_line, false);
        if fields.len() < 3 || fields.len() > 4 {
            if is_first && format == RatingFormat::CsvComma {
                continue;
            }
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 3 or 4 fields, found {}", fields.len()),
            });
        }
        let value: f64 = match fields[2].parse() {
            Ok(v) => v,
            Err(_) if is_first && format == RatingFormat::CsvComma => continue,
            Err(_) => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("rating '{}' is not a number", fields[2]),
                })
            }
        };
        if !value.is_finite() {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("rating '{}' is not finite", fields[2]),
            });
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: "empty user or item id".into(),
            });
        }
        let user = *users.entry(fields[0].to_string()).or_insert_with(|| {
            user_ids.push(fields[0].to_string());
            user_ids.len() - 1
        });
        let item = *items.entry(fields[1].to_string()).or_insert_with(|| {
            item_ids.push(fields[1].to_string());
            item_ids.len() - 1
        });
        if !seen.insert((user, item)) {
            return Err(Error::DuplicatePair {
                user: fields[0].to_string(),
                item: fields[1].to_string(),
            });
        }
        ratings.push(Rating { user, item, value });
    }

    let (lo, hi) = ratings
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
            (lo.min(r.value), hi.max(r.value))
        });
    let (lo, hi) = if ratings.is_empty() {
        (0.0, 0.0)
    } else {
        (lo, hi)
    };
    Ok(RatingsDataset {
        num_users: user_ids.len(),
        num_items: item_ids.len(),
        ratings,
        rating_lo: lo,
        rating_hi: hi,
        user_ids,
        item_ids,
    })
}

/// Affine map of every rating from the current scale onto `[lo, hi]`.
pub fn rescale_ratings(ds: &RatingsDataset, lo: f64, hi: f64) -> Result<RatingsDataset> {
    if !(ds.rating_hi > ds.rating_lo) {
        return Err(Error::invalid(format!(
            "degenerate source scale [{}, {}]",
            ds.rating_lo, ds.rating_hi
        )));
    }
    if !(hi > lo) {
        return Err(Error::invalid(format!(
            "degenerate target scale [{lo}, {hi}]"
        )));
    }
    if lo == ds.rating_lo && hi == ds.rating_hi {
        return Ok(ds.clone());
    }
    let factor = (hi - lo) / (ds.rating_hi - ds.rating_lo);
    let ratings = ds
        .ratings
        .iter()
        .map(|r| Rating {
            value: (lo + (r.value - ds.rating_lo) * factor).clamp(lo, hi),
            ..*r
        })
        .collect();
    Ok(RatingsDataset {
        rating_lo: lo,
        rating_hi: hi,
        ..ds.with_ratings(ratings)
    })
}

/// Keeps `min(xi, count)` ratings of every user, chosen uniformly without
/// replacement. Retained ratings keep their original order.
pub fn subsample_per_user(ds: &RatingsDataset, xi: usize, seed: u64) -> Result<RatingsDataset> {
    if xi == 0 {
        return Err(Error::invalid("per-user cap xi must be at least 1"));
    }
    let mut by_user: Vec<Vec<usize>> = vec![Vec::new(); ds.num_users];
    for (idx, r) in ds.ratings.iter().enumerate() {
        by_user[r.user].push(idx);
    }
    let mut rng = RngStream::new(seed, AlgoTag::Data, 0, Purpose::Subsample).rng();
    let mut keep = vec![false; ds.ratings.len()];
    for list in &by_user {
        if list.len() <= xi {
            for &i in list {
                keep[i] = true;
            }
        } else {
            for pick in index::sample(&mut rng, list.len(), xi) {
                keep[list[pick]] = true;
            }
        }
    }
    let ratings = ds
        .ratings
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(r, _)| *r)
        .collect();
    Ok(ds.with_ratings(ratings))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTestSplit {
    pub train: RatingsDataset,
    pub test: Vec<Rating>,
}

/// Holds out `round(frac * |ratings|)` ratings uniformly at random.
pub fn split_train_test(ds: &RatingsDataset, frac: f64, seed: u64) -> Result<TrainTestSplit> {
    if !(0.0..1.0).contains(&frac) {
        return Err(Error::invalid(format!(
            "test fraction must lie in [0, 1), got {frac}"
        )));
    }
    let total = ds.ratings.len();
    let n_test = (frac * total as f64).round() as usize;
    let mut rng = RngStream::new(seed, AlgoTag::Data, 0, Purpose::Split).rng();
    let mut is_test = vec![false; total];
    for i in index::sample(&mut rng, total, n_test.min(total)) {
        is_test[i] = true;
    }
    let mut train = Vec::with_capacity(total - n_test);
    let mut test = Vec::with_capacity(n_test);
    for (r, &t) in ds.ratings.iter().zip(&is_test) {
        if t {
            test.push(*r);
        } else {
            train.push(*r);
        }
    }
    Ok(TrainTestSplit {
        train: ds.with_ratings(train),
        test,
    })
}

/// The revealed, centred sparse matrix `P_Omega(Y*)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedMatrix {
    pub rows: SparseRows,
    /// Per-user training mean that was subtracted.
    pub means: Vec<f64>,
    /// Every row norm is at most this (infinite before clipping).
    pub row_bound: f64,
    pub rating_lo: f64,
    pub rating_hi: f64,
}

impl ObservedMatrix {
    pub fn num_users(&self) -> usize {
        self.rows.n_rows()
    }

    pub fn num_items(&self) -> usize {
        self.rows.n_cols
    }

    /// `|Omega|`.
    pub fn num_observed(&self) -> usize {
        self.rows.nnz()
    }

    pub fn row(&self, user: usize) -> &SparseRow {
        &self.rows.rows[user]
    }
}

/// Subtracts each user's training mean. Users without training ratings get
/// the scale midpoint as their mean and an empty row.
pub fn center_per_user(
    train: &[Rating],
    num_users: usize,
    num_items: usize,
    rating_lo: f64,
    rating_hi: f64,
) -> Result<ObservedMatrix> {
    let mut per_user: Vec<Vec<(usize, f64)>> = vec![Vec::new(); num_users];
    for r in train {
        if r.user >= num_users || r.item >= num_items {
            return Err(Error::OutOfRange(format!(
                "({}, {}) outside {num_users} x {num_items}",
                r.user, r.item
            )));
        }
        per_user[r.user].push((r.item, r.value));
    }
    let midpoint = 0.5 * (rating_lo + rating_hi);
    let mut means = Vec::with_capacity(num_users);
    let mut rows = Vec::with_capacity(num_users);
    for mut entries in per_user {
        if entries.is_empty() {
            means.push(midpoint);
            rows.push(SparseRow::empty());
            continue;
        }
        entries.sort_by_key(|e| e.0);
        let mean = entries.iter().map(|e| e.1).sum::<f64>() / entries.len() as f64;
        means.push(mean);
        let (cols, vals) = entries.into_iter().map(|(j, v)| (j, v - mean)).unzip();
        rows.push(SparseRow::new(cols, vals)?);
    }
    Ok(ObservedMatrix {
        rows: SparseRows::new(num_items, rows)?,
        means,
        row_bound: f64::INFINITY,
        rating_lo,
        rating_hi,
    })
}

/// Scales every row whose norm exceeds `bound` back onto the sphere of
/// radius `bound`.
pub fn clip_rows(obs: &ObservedMatrix, bound: f64) -> Result<ObservedMatrix> {
    if !(bound > 0.0) {
        return Err(Error::invalid(format!(
            "row bound must be positive, got {bound}"
        )));
    }
    let mut out = obs.clone();
    for row in &mut out.rows.rows {
        let nrm = row.norm();
        if nrm > bound {
            row.scale(bound / nrm);
        }
    }
    out.row_bound = bound;
    Ok(out)
}

/// Data-independent row bound `((hi - lo) / 2) * sqrt(xi)` for centred rows
/// with at most `xi` entries.
pub fn schema_row_bound(rating_lo: f64, rating_hi: f64, xi: usize) -> f64 {
    0.5 * (rating_hi - rating_lo) * (xi as f64).sqrt()
}

/// Output of [`prepare`].
#[derive(Debug, Clone)]
pub struct Prepared {
    pub observed: ObservedMatrix,
    pub test: Vec<Rating>,
}

/// Split, subsample, centre and clip with the schema row bound.
pub fn prepare(ds: &RatingsDataset, xi: usize, test_frac: f64, seed: u64) -> Result<Prepared> {
    let split = split_train_test(ds, test_frac, seed)?;
    let train = subsample_per_user(&split.train, xi, seed)?;
    let centred = center_per_user(
        &train.ratings,
        ds.num_users,
        ds.num_items,
        ds.rating_lo,
        ds.rating_hi,
    )?;
    let bound = schema_row_bound(ds.rating_lo, ds.rating_hi, xi);
    Ok(Prepared {
        observed: clip_rows(&centred, bound)?,
        test: split.test,
    })
}

/// Writes the observed-matrix text format.
///
/// ```text
/// m n L lo hi
/// user_index<TAB>mean<TAB>item:value,item:value,...
/// ```
///
/// One line per user, in index order; users without observations have an
/// empty third field. Reals use Rust's shortest round-trip representation.
pub fn write_observed<W: Write>(obs: &ObservedMatrix, mut out: W) -> Result<()> {
    writeln!(
        out,
        "{} {} {} {} {}",
        obs.num_users(),
        obs.num_items(),
        obs.row_bound,
        obs.rating_lo,
        obs.rating_hi
    )?;
    for (i, row) in obs.rows.rows.iter().enumerate() {
        let entries: Vec<String> = row.iter().map(|(j, x)| format!("{j}:{x}")).collect();
        writeln!(out, "{i}\t{}\t{}", obs.means[i], entries.join(","))?;
    }
    Ok(())
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad {what} '{s}'"),
    })
}

pub fn read_observed<R: BufRead>(source: R) -> Result<ObservedMatrix> {
    let mut lines = source.lines().enumerate();
    let header = match lines.next() {
        Some((_, l)) => l?,
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "missing header".into(),
            })
        }
    };
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 5 {
        return Err(Error::Parse {
            line: 1,
            msg: "header must be 'm n L lo hi'".into(),
        });
    }
    let m: usize = parse_num(h[0], 1, "m")?;
    let n: usize = parse_num(h[1], 1, "n")?;
    let row_bound: f64 = parse_num(h[2], 1, "L")?;
    let lo: f64 = parse_num(h[3], 1, "lo")?;
    let hi: f64 = parse_num(h[4], 1, "hi")?;
    let mut rows = vec![SparseRow::empty(); m];
    let mut means = vec![0.5 * (lo + hi); m];
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                msg: "expected 'user<TAB>mean<TAB>entries'".into(),
            });
        }
        let user: usize = parse_num(parts[0], line_no, "user index")?;
        if user >= m {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("user {user} >= m = {m}"),
            });
        }
        means[user] = parse_num(parts[1], line_no, "mean")?;
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for entry in parts[2].split(',').filter(|e| !e.is_empty()) {
            let (j, x) = entry.split_once(':').ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("bad entry '{entry}'"),
            })?;
            cols.push(parse_num::<usize>(j, line_no, "item index")?);
            vals.push(parse_num::<f64>(x, line_no, "value")?);
        }
        rows[user] = SparseRow::new(cols, vals).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
    }
    Ok(ObservedMatrix {
        rows: SparseRows::new(n, rows)?,
        means,
        row_bound,
        rating_lo: lo,
        rating_hi: hi,
    })
}

/// Writes dense-index triplets as `user,item,rating` lines.
pub fn write_triplets<W: Write>(ratings: &[Rating], mut out: W) -> Result<()> {
    for r in ratings {
        writeln!(out, "{},{},{}", r.user, r.item, r.value)?;
    }
    Ok(())
}

/// Reads `user,item,rating` lines with dense indices.
pub fn read_triplets<R: BufRead>(source: R) -> Result<Vec<Rating>> {
    let mut out = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let f: Vec<&str> = t.split(',').collect();
        if f.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                msg: "expected 'user,item,rating'".into(),
            });
        }
        out.push(Rating {
            user: parse_num(f[0], line_no, "user index")?,
            item: parse_num(f[1], line_no, "item index")?,
            value: parse_num(f[2], line_no, "rating")?,
        });
    }
    Ok(out)
}

/// Writes an `index<TAB>raw_id` map.
pub fn write_id_map<W: Write>(ids: &[String], mut out: W) -> Result<()> {
    for (i, id) in ids.iter().enumerate() {
        writeln!(out, "{i}\t{id}")?;
    }
    Ok(())
}
