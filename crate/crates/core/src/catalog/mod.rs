//! Two-arm relational store.
//!
//! Arm A is the complete record of ingested images and expert labels, plus
//! trained models, bulk inferences and threshold tables. Arm B holds the live
//! operational decisions made by the gatekeeper. Both arms live in one SQLite
//! database so cross-arm reads (e.g. the sampled-but-unlabeled queue) are a
//! single query. Image bytes stay on disk; see [`layout`] for the path rule.

pub mod layout;
mod schema;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};

use rand::RngCore;
use rusqlite::{params, Connection, OptionalExtension, Row};
use serde::{Deserialize, Serialize};

use crate::classifier::{ConfidenceVector, TrainConfig, TrainMetrics};
use crate::dataset::SplitConfig;
use crate::evaluation::{InferenceRecord, ThresholdTable};
use crate::{Error, Result, Timestamp};

pub use layout::{capture_token, layout_path, parse_filename, parse_layout, LayoutPath, ScanReport};

pub const DEFAULT_CLASSES: [&str; 3] = ["Good", "Bad", "NoData"];
pub const DEFAULT_ALARM_CLASSES: [&str; 1] = ["Bad"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilesystemRoot {
    pub root_id: String,
    pub base_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub image_id: i64,
    pub root_id: String,
    pub run_period: String,
    pub run_number: i64,
    pub plot_type: String,
    pub filename: String,
    pub captured_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub label_id: i64,
    pub image_id: i64,
    pub class_name: String,
    pub labeler: String,
    pub labeled_at: Timestamp,
}

/// Declared classes of a plot type and the subset that raises alarms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSet {
    pub plot_type: String,
    pub classes: Vec<String>,
    pub alarm_classes: Vec<String>,
}

impl ClassSet {
    pub fn new<C, A>(plot_type: &str, classes: C, alarm_classes: A) -> Result<Self>
    where
        C: IntoIterator,
        C::Item: Into<String>,
        A: IntoIterator,
        A::Item: Into<String>,
    {
        let classes: Vec<String> = classes.into_iter().map(Into::into).collect();
        let alarm_classes: Vec<String> = alarm_classes.into_iter().map(Into::into).collect();
        if classes.is_empty() {
            return Err(Error::InvalidConfig(format!("plot type `{plot_type}` has no classes")));
        }
        for (i, c) in classes.iter().enumerate() {
            if c.is_empty() || classes[..i].contains(c) {
                return Err(Error::InvalidConfig(format!(
                    "plot type `{plot_type}`: class names must be unique and non-empty"
                )));
            }
        }
        if let Some(a) = alarm_classes.iter().find(|a| !classes.contains(a)) {
            return Err(Error::InvalidConfig(format!(
                "plot type `{plot_type}`: alarm class `{a}` is not a declared class"
            )));
        }
        Ok(Self {
            plot_type: plot_type.to_string(),
            classes,
            alarm_classes,
        })
    }

    /// `[Good, Bad, NoData]` with `Bad` alarming.
    pub fn default_for(plot_type: &str) -> Self {
        Self::new(plot_type, DEFAULT_CLASSES, DEFAULT_ALARM_CLASSES).expect("valid defaults")
    }

    pub fn contains(&self, class_name: &str) -> bool {
        self.classes.iter().any(|c| c == class_name)
    }

    pub fn is_alarm(&self, class_name: &str) -> bool {
        self.alarm_classes.iter().any(|c| c == class_name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct User {
    pub user_id: String,
    pub is_admin: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permission {
    pub user: String,
    pub plot_type: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub model_id: i64,
    pub plot_type: String,
    pub backend: String,
    pub class_names: Vec<String>,
    pub created_at: Timestamp,
    pub train_config: Option<TrainConfig>,
    pub split_config: Option<SplitConfig>,
    pub metrics: Option<TrainMetrics>,
}

#[derive(Debug, Clone)]
pub struct NewModel {
    pub plot_type: String,
    pub backend: String,
    pub class_names: Vec<String>,
    pub blob: Vec<u8>,
    pub train_config: Option<TrainConfig>,
    pub split_config: Option<SplitConfig>,
    pub metrics: Option<TrainMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    Ok,
    Alarm,
    Flagged,
    NoModel,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Ok => "Ok",
            Decision::Alarm => "Alarm",
            Decision::Flagged => "Flagged",
            Decision::NoModel => "NoModel",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "Ok" => Decision::Ok,
            "Alarm" => Decision::Alarm,
            "Flagged" => Decision::Flagged,
            "NoModel" => Decision::NoModel,
            other => {
                return Err(Error::Store(rusqlite::Error::InvalidColumnType(
                    0,
                    format!("decision `{other}`"),
                    rusqlite::types::Type::Text,
                )))
            }
        })
    }
}

impl std::fmt::Display for Decision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One live gatekeeper decision (arm B).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperationalRecord {
    pub record_id: i64,
    pub image_id: i64,
    pub plot_type: String,
    pub model_id: Option<i64>,
    /// Empty when no model ran.
    pub confidence_vector: ConfidenceVector,
    pub predicted_class: Option<String>,
    pub confidence: Option<f64>,
    pub decision: Decision,
    pub sampled: bool,
    pub decided_at: Timestamp,
    /// Error context, e.g. why an image could not be classified.
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewOperationalRecord {
    pub image_id: i64,
    pub model_id: Option<i64>,
    pub confidence_vector: ConfidenceVector,
    pub decision: Decision,
    pub sampled: bool,
    pub decided_at: Timestamp,
    pub note: Option<String>,
}

/// Filter for [`Catalog::query_images`]. Ranges are inclusive.
#[derive(Debug, Clone, Default)]
pub struct ImageQuery {
    pub plot_type: Option<String>,
    pub run_period: Option<String>,
    pub run_range: Option<(i64, i64)>,
    /// `Some(false)`: only images with no label records at all.
    pub labeled: Option<bool>,
    pub time_range: Option<(Timestamp, Timestamp)>,
    pub descending: bool,
    pub offset: usize,
    pub limit: Option<usize>,
}

/// Handle to the store. Share it across threads behind an `Arc`; every
/// statement runs under one connection lock, so writes are serialized.
pub struct Catalog {
    conn: Mutex<Connection>,
}

impl Catalog {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let conn = Connection::open(path)?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "NORMAL")?;
        Self::init(conn)
    }

    pub fn open_in_memory() -> Result<Self> {
        Self::init(Connection::open_in_memory()?)
    }

    fn init(conn: Connection) -> Result<Self> {
        conn.busy_timeout(std::time::Duration::from_secs(10))?;
        conn.pragma_update(None, "foreign_keys", "ON")?;
        conn.execute_batch(schema::SCHEMA)?;
        Ok(Self {
            conn: Mutex::new(conn),
        })
    }

    fn conn(&self) -> MutexGuard<'_, Connection> {
        self.conn.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    // ---- roots -----------------------------------------------------------

    /// Adds a root, or confirms an identical existing one.
    pub fn add_root(&self, root_id: &str, base_path: impl AsRef<Path>) -> Result<FilesystemRoot> {
        let base_path = base_path.as_ref();
        if !base_path.is_absolute() {
            return Err(Error::InvalidConfig(format!(
                "root `{root_id}` base path must be absolute: {}",
                base_path.display()
            )));
        }
        let path_str = path_to_str(base_path)?;
        let conn = self.conn();
        let existing: Option<String> = conn
            .query_row("SELECT base_path FROM roots WHERE root_id = ?1", [root_id], |r| r.get(0))
            .optional()?;
        match existing {
            Some(p) if p == path_str => {}
            Some(p) => {
                return Err(Error::InvalidConfig(format!(
                    "root `{root_id}` already registered at {p}"
                )))
            }
            None => {
                conn.execute(
                    "INSERT INTO roots(root_id, base_path) VALUES (?1, ?2)",
                    params![root_id, path_str],
                )?;
            }
        }
        Ok(FilesystemRoot {
            root_id: root_id.to_string(),
            base_path: base_path.to_path_buf(),
        })
    }

    pub fn root(&self, root_id: &str) -> Result<FilesystemRoot> {
        self.conn()
            .query_row("SELECT root_id, base_path FROM roots WHERE root_id = ?1", [root_id], |r| {
                Ok(FilesystemRoot {
                    root_id: r.get(0)?,
                    base_path: PathBuf::from(r.get::<_, String>(1)?),
                })
            })
            .optional()?
            .ok_or_else(|| Error::UnknownRoot(root_id.to_string()))
    }

    pub fn roots(&self) -> Result<Vec<FilesystemRoot>> {
        let conn = self.conn();
        let mut stmt = conn.prepare("SELECT root_id, base_path FROM roots ORDER BY root_id")?;
        let rows = stmt.query_map([], |r| {
            Ok(FilesystemRoot {
                root_id: r.get(0)?,
                base_path: PathBuf::from(r.get::<_, String>(1)?),
            })
        })?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    // ---- class sets ------------------------------------------------------

    pub fn set_class_set(&self, set: &ClassSet) -> Result<()> {
        self.conn().execute(
            "INSERT INTO class_sets(plot_type, classes, alarm_classes) VALUES (?1, ?2, ?3)
             ON CONFLICT(plot_type) DO UPDATE SET classes = excluded.classes,
                                                  alarm_classes = excluded.alarm_classes",
            params![
                set.plot_type,
                serde_json::to_string(&set.classes)?,
                serde_json::to_string(&set.alarm_classes)?
            ],
        )?;
        Ok(())
    }

    /// The declared class set, or the default set when none was declared.
    pub fn class_set(&self, plot_type: &str) -> Result<ClassSet> {
        let row: Option<(String, String)> = self
            .conn()
            .query_row(
                "SELECT classes, alarm_classes FROM class_sets WHERE plot_type = ?1",
                [plot_type],
                |r| Ok((r.get(0)?, r.get(1)?)),
            )
            .optional()?;
        match row {
            Some((classes, alarms)) => Ok(ClassSet {
                plot_type: plot_type.to_string(),
                classes: serde_json::from_str(&classes)?,
                alarm_classes: serde_json::from_str(&alarms)?,
            }),
            None => Ok(ClassSet::default_for(plot_type)),
        }
    }

    /// Plot types with at least one image or a declared class set.
    pub fn plot_types(&self) -> Result<Vec<String>> {
        let conn = self.conn();
        let mut stmt = conn.prepare(
            "SELECT plot_type FROM images UNION SELECT plot_type FROM class_sets ORDER BY 1",
        )?;
        let rows = stmt.query_map([], |r| r.get(0))?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    pub fn is_known_plot_type(&self, plot_type: &str) -> Result<bool> {
        Ok(self.conn().query_row(
            "SELECT EXISTS(SELECT 1 FROM images WHERE plot_type = ?1)
                 OR EXISTS(SELECT 1 FROM class_sets WHERE plot_type = ?1)",
            [plot_type],
            |r| r.get(0),
        )?)
    }

    // ---- images ----------------------------------------------------------

    /// Idempotent: re-registering the same (root, period, run, plot type,
    /// filename) returns the existing record.
    pub fn register_image(
        &self,
        root_id: &str,
        run_period: &str,
        run_number: i64,
        plot_type: &str,
        filename: &str,
        captured_at: Timestamp,
    ) -> Result<ImageRef> {
        self.register_image_tracked(root_id, run_period, run_number, plot_type, filename, captured_at)
            .map(|(image, _)| image)
    }

    /// Like [`register_image`](Self::register_image), also reporting whether a
    /// new row was created.
    pub fn register_image_tracked(
        &self,
        root_id: &str,
        run_period: &str,
        run_number: i64,
        plot_type: &str,
        filename: &str,
        captured_at: Timestamp,
    ) -> Result<(ImageRef, bool)> {
        if run_number < 1 {
            return Err(Error::MalformedRunNumber(run_number));
        }
        if filename.is_empty() {
            return Err(Error::EmptyFilename);
        }
        let conn = self.conn();
        let root_exists: bool = conn.query_row(
            "SELECT EXISTS(SELECT 1 FROM roots WHERE root_id = ?1)",
            [root_id],
            |r| r.get(0),
        )?;
        if !root_exists {
            return Err(Error::UnknownRoot(root_id.to_string()));
        }
        let inserted = conn.execute(
            "INSERT OR IGNORE INTO images(root_id, run_period, run_number, plot_type, filename, captured_at)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            params![root_id, run_period, run_number, plot_type, filename, captured_at.timestamp()],
        )? == 1;
        let image = conn.query_row(
            &format!(
                "SELECT {IMAGE_COLUMNS} FROM images i WHERE root_id = ?1 AND run_period = ?2
                 AND run_number = ?3 AND plot_type = ?4 AND filename = ?5"
            ),
            params![root_id, run_period, run_number, plot_type, filename],
            image_from_row,
        )?;
        Ok((image, inserted))
    }

    pub fn image(&self, image_id: i64) -> Result<ImageRef> {
        self.conn()
            .query_row(
                &format!("SELECT {IMAGE_COLUMNS} FROM images i WHERE image_id = ?1"),
                [image_id],
                image_from_row,
            )
            .optional()?
            .ok_or(Error::UnknownImage(image_id))
    }

    pub fn image_count(&self) -> Result<usize> {
        Ok(self
            .conn()
            .query_row("SELECT COUNT(*) FROM images", [], |r| r.get::<_, i64>(0))? as usize)
    }

    /// `<base_path>/<run_period>/Run<NNNNNN>/<filename>`.
    pub fn resolve_path(&self, image_id: i64) -> Result<PathBuf> {
        let (base, period, run, filename): (String, String, i64, String) = self
            .conn()
            .query_row(
                "SELECT r.base_path, i.run_period, i.run_number, i.filename
                 FROM images i JOIN roots r ON r.root_id = i.root_id WHERE i.image_id = ?1",
                [image_id],
                |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?)),
            )
            .optional()?
            .ok_or(Error::UnknownImage(image_id))?;
        Ok(layout_path(Path::new(&base), &period, run, &filename))
    }

    /// Images matching `query`, each with its effective label, sorted by
    /// `(captured_at, image_id)`.
    pub fn query_images(&self, query: &ImageQuery) -> Result<Vec<(ImageRef, Option<String>)>> {
        let mut clauses = Vec::new();
        let mut args: Vec<rusqlite::types::Value> = Vec::new();
        if let Some(pt) = &query.plot_type {
            args.push(pt.clone().into());
            clauses.push(format!("i.plot_type = ?{}", args.len()));
        }
        if let Some(rp) = &query.run_period {
            args.push(rp.clone().into());
            clauses.push(format!("i.run_period = ?{}", args.len()));
        }
        if let Some((lo, hi)) = query.run_range {
            args.push(lo.into());
            args.push(hi.into());
            clauses.push(format!("i.run_number BETWEEN ?{} AND ?{}", args.len() - 1, args.len()));
        }
        if let Some((from, to)) = query.time_range {
            args.push(from.timestamp().into());
            args.push(to.timestamp().into());
            clauses.push(format!("i.captured_at BETWEEN ?{} AND ?{}", args.len() - 1, args.len()));
        }
        match query.labeled {
            Some(true) => clauses.push("e.class_name IS NOT NULL".into()),
            Some(false) => clauses.push("e.class_name IS NULL".into()),
            None => {}
        }
        let where_sql = if clauses.is_empty() {
            String::new()
        } else {
            format!("WHERE {}", clauses.join(" AND "))
        };
        let dir = if query.descending { "DESC" } else { "ASC" };
        let limit = query.limit.map_or(-1, |l| l as i64);
        let sql = format!(
            "{EFFECTIVE_LABELS_CTE}
             SELECT {IMAGE_COLUMNS}, e.class_name FROM images i
             LEFT JOIN effective e ON e.image_id = i.image_id
             {where_sql}
             ORDER BY i.captured_at {dir}, i.image_id {dir}
             LIMIT {limit} OFFSET {}",
            query.offset
        );
        let conn = self.conn();
        let mut stmt = conn.prepare(&sql)?;
        let rows = stmt.query_map(rusqlite::params_from_iter(args), |r| {
            Ok((image_from_row(r)?, r.get::<_, Option<String>>(7)?))
        })?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    // ---- labels ----------------------------------------------------------

    pub fn record_label(&self, image_id: i64, class_name: &str, labeler: &str) -> Result<LabelRecord> {
        self.record_label_at(image_id, class_name, labeler, crate::now())
    }

    pub fn record_label_at(
        &self,
        image_id: i64,
        class_name: &str,
        labeler: &str,
        labeled_at: Timestamp,
    ) -> Result<LabelRecord> {
        let image = self.image(image_id)?;
        self.check_class(&image.plot_type, class_name)?;
        let conn = self.conn();
        conn.execute(
            "INSERT INTO labels(image_id, class_name, labeler, labeled_at) VALUES (?1, ?2, ?3, ?4)",
            params![image_id, class_name, labeler, labeled_at.timestamp()],
        )?;
        Ok(LabelRecord {
            label_id: conn.last_insert_rowid(),
            image_id,
            class_name: class_name.to_string(),
            labeler: labeler.to_string(),
            labeled_at,
        })
    }

    /// Appends one label per image in a single transaction. All images must
    /// belong to `plot_type`.
    pub fn record_labels(
        &self,
        plot_type: &str,
        image_ids: &[i64],
        class_name: &str,
        labeler: &str,
    ) -> Result<usize> {
        self.check_class(plot_type, class_name)?;
        let at = crate::now().timestamp();
        let mut conn = self.conn();
        let tx = conn.transaction()?;
        {
            let mut check = tx.prepare("SELECT plot_type FROM images WHERE image_id = ?1")?;
            let mut insert = tx.prepare(
                "INSERT INTO labels(image_id, class_name, labeler, labeled_at) VALUES (?1, ?2, ?3, ?4)",
            )?;
            for &id in image_ids {
                let pt: String = check
                    .query_row([id], |r| r.get(0))
                    .optional()?
                    .ok_or(Error::UnknownImage(id))?;
                if pt != plot_type {
                    return Err(Error::PlotTypeMismatch(plot_type.to_string(), pt));
                }
                insert.execute(params![id, class_name, labeler, at])?;
            }
        }
        tx.commit()?;
        Ok(image_ids.len())
    }

    fn check_class(&self, plot_type: &str, class_name: &str) -> Result<()> {
        if self.class_set(plot_type)?.contains(class_name) {
            Ok(())
        } else {
            Err(Error::UnknownClass {
                plot_type: plot_type.to_string(),
                class: class_name.to_string(),
            })
        }
    }

    pub fn labels_for(&self, image_id: i64) -> Result<Vec<LabelRecord>> {
        let conn = self.conn();
        let mut stmt = conn.prepare(
            "SELECT label_id, image_id, class_name, labeler, labeled_at FROM labels
             WHERE image_id = ?1 ORDER BY label_id",
        )?;
        let rows = stmt.query_map([image_id], label_from_row)?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    pub fn label_count(&self) -> Result<usize> {
        Ok(self
            .conn()
            .query_row("SELECT COUNT(*) FROM labels", [], |r| r.get::<_, i64>(0))? as usize)
    }

    /// Latest label by `labeled_at`; ties go to the larger `label_id`.
    pub fn effective_label(&self, image_id: i64) -> Result<Option<String>> {
        Ok(self
            .conn()
            .query_row(
                "SELECT class_name FROM labels WHERE image_id = ?1
                 ORDER BY labeled_at DESC, label_id DESC LIMIT 1",
                [image_id],
                |r| r.get(0),
            )
            .optional()?)
    }

    /// Effective labels of all labeled images of a plot type.
    pub fn effective_labels(&self, plot_type: &str) -> Result<BTreeMap<i64, String>> {
        let conn = self.conn();
        let mut stmt = conn.prepare(&format!(
            "{EFFECTIVE_LABELS_CTE}
             SELECT e.image_id, e.class_name FROM effective e
             JOIN images i ON i.image_id = e.image_id WHERE i.plot_type = ?1"
        ))?;
        let rows = stmt.query_map([plot_type], |r| Ok((r.get(0)?, r.get(1)?)))?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    // ---- users, tokens, permissions ---------------------------------------

    pub fn add_user(&self, user_id: &str, is_admin: bool) -> Result<User> {
        self.conn().execute(
            "INSERT INTO users(user_id, is_admin) VALUES (?1, ?2)
             ON CONFLICT(user_id) DO UPDATE SET is_admin = excluded.is_admin",
            params![user_id, is_admin],
        )?;
        Ok(User {
            user_id: user_id.to_string(),
            is_admin,
        })
    }

    pub fn user(&self, user_id: &str) -> Result<Option<User>> {
        Ok(self
            .conn()
            .query_row(
                "SELECT user_id, is_admin FROM users WHERE user_id = ?1",
                [user_id],
                |r| {
                    Ok(User {
                        user_id: r.get(0)?,
                        is_admin: r.get(1)?,
                    })
                },
            )
            .optional()?)
    }

    /// Issues a fresh random bearer token for an existing user.
    pub fn issue_token(&self, user_id: &str) -> Result<String> {
        if self.user(user_id)?.is_none() {
            return Err(Error::UnknownUser(user_id.to_string()));
        }
        let mut bytes = [0u8; 24];
        rand::rng().fill_bytes(&mut bytes);
        let token: String = bytes.iter().map(|b| format!("{b:02x}")).collect();
        self.conn().execute(
            "INSERT INTO api_tokens(token, user_id) VALUES (?1, ?2)",
            params![token, user_id],
        )?;
        Ok(token)
    }

    pub fn user_for_token(&self, token: &str) -> Result<Option<User>> {
        Ok(self
            .conn()
            .query_row(
                "SELECT u.user_id, u.is_admin FROM api_tokens t JOIN users u ON u.user_id = t.user_id
                 WHERE t.token = ?1",
                [token],
                |r| {
                    Ok(User {
                        user_id: r.get(0)?,
                        is_admin: r.get(1)?,
                    })
                },
            )
            .optional()?)
    }

    /// Raw, idempotent permission insert. Authorization of the granting user
    /// is the labeling module's job.
    pub fn insert_permission(&self, user_id: &str, plot_type: &str) -> Result<Permission> {
        if self.user(user_id)?.is_none() {
            return Err(Error::UnknownUser(user_id.to_string()));
        }
        self.conn().execute(
            "INSERT OR IGNORE INTO permissions(user_id, plot_type) VALUES (?1, ?2)",
            params![user_id, plot_type],
        )?;
        Ok(Permission {
            user: user_id.to_string(),
            plot_type: plot_type.to_string(),
        })
    }

    pub fn has_permission(&self, user_id: &str, plot_type: &str) -> Result<bool> {
        Ok(self.conn().query_row(
            "SELECT EXISTS(SELECT 1 FROM permissions WHERE user_id = ?1 AND plot_type = ?2)",
            params![user_id, plot_type],
            |r| r.get(0),
        )?)
    }

    pub fn permission_count(&self) -> Result<usize> {
        Ok(self
            .conn()
            .query_row("SELECT COUNT(*) FROM permissions", [], |r| r.get::<_, i64>(0))?
            as usize)
    }

    // ---- models ----------------------------------------------------------

    pub fn insert_model(&self, model: NewModel) -> Result<ModelRecord> {
        let created_at = crate::now();
        let conn = self.conn();
        conn.execute(
            "INSERT INTO models(plot_type, backend, class_names, created_at, blob,
                                train_config, split_config, metrics)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)",
            params![
                model.plot_type,
                model.backend,
                serde_json::to_string(&model.class_names)?,
                created_at.timestamp(),
                model.blob,
                opt_json(&model.train_config)?,
                opt_json(&model.split_config)?,
                opt_json(&model.metrics)?,
            ],
        )?;
        Ok(ModelRecord {
            model_id: conn.last_insert_rowid(),
            plot_type: model.plot_type,
            backend: model.backend,
            class_names: model.class_names,
            created_at,
            train_config: model.train_config,
            split_config: model.split_config,
            metrics: model.metrics,
        })
    }

    pub fn model(&self, model_id: i64) -> Result<ModelRecord> {
        let raw = self
            .conn()
            .query_row(
                &format!("SELECT {MODEL_COLUMNS} FROM models WHERE model_id = ?1"),
                [model_id],
                raw_model_from_row,
            )
            .optional()?
            .ok_or(Error::UnknownModel(model_id))?;
        raw.into_record()
    }

    pub fn model_blob(&self, model_id: i64) -> Result<Vec<u8>> {
        self.conn()
            .query_row("SELECT blob FROM models WHERE model_id = ?1", [model_id], |r| r.get(0))
            .optional()?
            .ok_or(Error::UnknownModel(model_id))
    }

    /// All models, newest first.
    pub fn models(&self) -> Result<Vec<ModelRecord>> {
        let raws: Vec<RawModel> = {
            let conn = self.conn();
            let mut stmt = conn.prepare(&format!(
                "SELECT {MODEL_COLUMNS} FROM models ORDER BY created_at DESC, model_id DESC"
            ))?;
            let rows = stmt.query_map([], raw_model_from_row)?;
            rows.collect::<rusqlite::Result<_>>()?
        };
        raws.into_iter().map(RawModel::into_record).collect()
    }

    /// The newest model trained for `plot_type`.
    pub fn latest_model(&self, plot_type: &str) -> Result<Option<ModelRecord>> {
        let raw = self
            .conn()
            .query_row(
                &format!(
                    "SELECT {MODEL_COLUMNS} FROM models WHERE plot_type = ?1
                     ORDER BY created_at DESC, model_id DESC LIMIT 1"
                ),
                [plot_type],
                raw_model_from_row,
            )
            .optional()?;
        raw.map(RawModel::into_record).transpose()
    }

    /// Records which images a model was trained and validated on.
    pub fn record_split(&self, model_id: i64, train: &[i64], validation: &[i64]) -> Result<()> {
        let mut conn = self.conn();
        let tx = conn.transaction()?;
        {
            let mut stmt = tx.prepare(
                "INSERT OR IGNORE INTO model_split(model_id, image_id, part) VALUES (?1, ?2, ?3)",
            )?;
            for &id in train {
                stmt.execute(params![model_id, id, "train"])?;
            }
            for &id in validation {
                stmt.execute(params![model_id, id, "validation"])?;
            }
        }
        tx.commit()?;
        Ok(())
    }

    pub fn split_image_ids(&self, model_id: i64, part: &str) -> Result<Vec<i64>> {
        let conn = self.conn();
        let mut stmt = conn.prepare(
            "SELECT image_id FROM model_split WHERE model_id = ?1 AND part = ?2 ORDER BY image_id",
        )?;
        let rows = stmt.query_map(params![model_id, part], |r| r.get(0))?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    // ---- inferences and thresholds (arm A analytics) ----------------------

    /// Inserts or replaces the records for `(model, image)` pairs.
    pub fn replace_inferences(&self, records: &[InferenceRecord]) -> Result<()> {
        let mut conn = self.conn();
        let tx = conn.transaction()?;
        {
            let mut stmt = tx.prepare(
                "INSERT OR REPLACE INTO inferences(model_id, image_id, confidences,
                                                   predicted_class, confidence, inferred_at)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            )?;
            for r in records {
                stmt.execute(params![
                    r.model_id,
                    r.image_id,
                    serde_json::to_string(&r.confidence_vector)?,
                    r.predicted_class,
                    r.confidence,
                    r.inferred_at.timestamp()
                ])?;
            }
        }
        tx.commit()?;
        Ok(())
    }

    pub fn inferences(&self, model_id: i64) -> Result<Vec<InferenceRecord>> {
        let conn = self.conn();
        let mut stmt = conn.prepare(
            "SELECT model_id, image_id, confidences, predicted_class, confidence, inferred_at
             FROM inferences WHERE model_id = ?1 ORDER BY image_id",
        )?;
        let rows = stmt.query_map([model_id], |r| {
            Ok((
                r.get::<_, i64>(0)?,
                r.get::<_, i64>(1)?,
                r.get::<_, String>(2)?,
                r.get::<_, String>(3)?,
                r.get::<_, f64>(4)?,
                r.get::<_, i64>(5)?,
            ))
        })?;
        let mut out = Vec::new();
        for row in rows {
            let (model_id, image_id, cv, predicted_class, confidence, at) = row?;
            out.push(InferenceRecord {
                image_id,
                model_id,
                confidence_vector: serde_json::from_str(&cv)?,
                predicted_class,
                confidence,
                inferred_at: ts(at),
            });
        }
        Ok(out)
    }

    pub fn insert_threshold_table(&self, table: &ThresholdTable) -> Result<ThresholdTable> {
        let conn = self.conn();
        conn.execute(
            "INSERT INTO threshold_tables(model_id, target_fpr, alarm_classes, entries, created_at)
             VALUES (?1, ?2, ?3, ?4, ?5)",
            params![
                table.model_id,
                table.target_fpr,
                serde_json::to_string(&table.alarm_classes)?,
                serde_json::to_string(&table.entries)?,
                table.created_at.timestamp()
            ],
        )?;
        Ok(ThresholdTable {
            table_id: conn.last_insert_rowid(),
            ..table.clone()
        })
    }

    pub fn latest_threshold_table(&self, model_id: i64) -> Result<Option<ThresholdTable>> {
        let row: Option<(i64, f64, String, String, i64)> = self
            .conn()
            .query_row(
                "SELECT table_id, target_fpr, alarm_classes, entries, created_at
                 FROM threshold_tables WHERE model_id = ?1 ORDER BY table_id DESC LIMIT 1",
                [model_id],
                |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?, r.get(4)?)),
            )
            .optional()?;
        row.map(|(table_id, target_fpr, alarms, entries, at)| {
            Ok(ThresholdTable {
                table_id,
                model_id,
                target_fpr,
                alarm_classes: serde_json::from_str(&alarms)?,
                entries: serde_json::from_str(&entries)?,
                created_at: ts(at),
            })
        })
        .transpose()
    }

    // ---- operational records (arm B) ---------------------------------------

    pub fn insert_operational(&self, rec: &NewOperationalRecord) -> Result<OperationalRecord> {
        let plot_type = self.image(rec.image_id)?.plot_type;
        let (predicted_class, confidence) = match rec.confidence_vector.argmax() {
            Some((_, c, p)) => (Some(c.to_string()), Some(p)),
            None => (None, None),
        };
        let conn = self.conn();
        conn.execute(
            "INSERT INTO operational_records(image_id, model_id, confidences, predicted_class,
                 confidence, decision, sampled, decided_at, note)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9)",
            params![
                rec.image_id,
                rec.model_id,
                serde_json::to_string(&rec.confidence_vector)?,
                predicted_class,
                confidence,
                rec.decision.as_str(),
                rec.sampled,
                rec.decided_at.timestamp(),
                rec.note
            ],
        )?;
        Ok(OperationalRecord {
            record_id: conn.last_insert_rowid(),
            image_id: rec.image_id,
            plot_type,
            model_id: rec.model_id,
            confidence_vector: rec.confidence_vector.clone(),
            predicted_class,
            confidence,
            decision: rec.decision,
            sampled: rec.sampled,
            decided_at: rec.decided_at,
            note: rec.note.clone(),
        })
    }

    /// All operational records, oldest first.
    pub fn operational_records(&self) -> Result<Vec<OperationalRecord>> {
        self.query_operational("", [])
    }

    /// Records decided in `[from, to]` with the given decisions, newest first.
    pub fn operational_between(
        &self,
        from: Timestamp,
        to: Timestamp,
        decisions: &[Decision],
    ) -> Result<Vec<OperationalRecord>> {
        let list = decisions
            .iter()
            .map(|d| format!("'{}'", d.as_str()))
            .collect::<Vec<_>>()
            .join(",");
        let mut recs = self.query_operational(
            &format!("WHERE o.decided_at BETWEEN ?1 AND ?2 AND o.decision IN ({list})"),
            [from.timestamp(), to.timestamp()],
        )?;
        recs.reverse();
        Ok(recs)
    }

    /// Most recent record per plot type, ordered by plot type.
    pub fn latest_operational_per_plot_type(&self) -> Result<Vec<OperationalRecord>> {
        let mut recs = self.query_operational(
            "WHERE o.record_id IN (
                 SELECT record_id FROM (
                     SELECT o2.record_id, ROW_NUMBER() OVER (
                         PARTITION BY i2.plot_type
                         ORDER BY o2.decided_at DESC, o2.record_id DESC) AS rn
                     FROM operational_records o2 JOIN images i2 ON i2.image_id = o2.image_id)
                 WHERE rn = 1)",
            [],
        )?;
        recs.sort_by(|a, b| a.plot_type.cmp(&b.plot_type));
        Ok(recs)
    }

    /// Image ids of sampled records whose image has no label yet, in
    /// capture order.
    pub fn sampled_unlabeled(&self) -> Result<Vec<i64>> {
        let conn = self.conn();
        let mut stmt = conn.prepare(
            "SELECT i.image_id FROM images i
             WHERE EXISTS(SELECT 1 FROM operational_records o WHERE o.image_id = i.image_id AND o.sampled)
               AND NOT EXISTS(SELECT 1 FROM labels l WHERE l.image_id = i.image_id)
             ORDER BY i.captured_at, i.image_id",
        )?;
        let rows = stmt.query_map([], |r| r.get(0))?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    pub fn has_operational(&self, image_id: i64) -> Result<bool> {
        Ok(self.conn().query_row(
            "SELECT EXISTS(SELECT 1 FROM operational_records WHERE image_id = ?1)",
            [image_id],
            |r| r.get(0),
        )?)
    }

    fn query_operational<P: rusqlite::Params>(
        &self,
        where_sql: &str,
        args: P,
    ) -> Result<Vec<OperationalRecord>> {
        let conn = self.conn();
        let mut stmt = conn.prepare(&format!(
            "SELECT o.record_id, o.image_id, i.plot_type, o.model_id, o.confidences,
                    o.predicted_class, o.confidence, o.decision, o.sampled, o.decided_at, o.note
             FROM operational_records o JOIN images i ON i.image_id = o.image_id
             {where_sql}
             ORDER BY o.decided_at, o.record_id"
        ))?;
        let rows = stmt.query_map(args, |r| {
            Ok((
                r.get::<_, i64>(0)?,
                r.get::<_, i64>(1)?,
                r.get::<_, String>(2)?,
                r.get::<_, Option<i64>>(3)?,
                r.get::<_, String>(4)?,
                r.get::<_, Option<String>>(5)?,
                r.get::<_, Option<f64>>(6)?,
                r.get::<_, String>(7)?,
                r.get::<_, bool>(8)?,
                r.get::<_, i64>(9)?,
                r.get::<_, Option<String>>(10)?,
            ))
        })?;
        let mut out = Vec::new();
        for row in rows {
            let (record_id, image_id, plot_type, model_id, cv, predicted_class, confidence, decision, sampled, at, note) =
                row?;
            out.push(OperationalRecord {
                record_id,
                image_id,
                plot_type,
                model_id,
                confidence_vector: serde_json::from_str(&cv)?,
                predicted_class,
                confidence,
                decision: Decision::parse(&decision)?,
                sampled,
                decided_at: ts(at),
                note,
            });
        }
        Ok(out)
    }

    // ---- ingestion -------------------------------------------------------

    /// Walks a root in catalog layout and registers every PNG found. Newly
    /// registered images are returned in capture order.
    pub fn scan_root(&self, root_id: &str) -> Result<ScanReport> {
        let root = self.root(root_id)?;
        let found = layout::walk_root(&root.base_path)?;
        let mut report = ScanReport::default();
        for entry in found {
            match entry {
                Ok(f) => {
                    let (image, created) = self.register_image_tracked(
                        root_id,
                        &f.run_period,
                        f.run_number,
                        &f.plot_type,
                        &f.filename,
                        f.captured_at,
                    )?;
                    if created {
                        report.registered.push(image);
                    } else {
                        report.existing += 1;
                    }
                }
                Err(path) => report.skipped.push(path),
            }
        }
        report
            .registered
            .sort_by_key(|i| (i.captured_at, i.image_id));
        Ok(report)
    }
}

const IMAGE_COLUMNS: &str =
    "i.image_id, i.root_id, i.run_period, i.run_number, i.plot_type, i.filename, i.captured_at";

const MODEL_COLUMNS: &str =
    "model_id, plot_type, backend, class_names, created_at, train_config, split_config, metrics";

const EFFECTIVE_LABELS_CTE: &str = "WITH effective AS (
    SELECT image_id, class_name FROM (
        SELECT image_id, class_name, ROW_NUMBER() OVER (
            PARTITION BY image_id ORDER BY labeled_at DESC, label_id DESC) AS rn
        FROM labels)
    WHERE rn = 1)";

fn ts(secs: i64) -> Timestamp {
    chrono::DateTime::from_timestamp(secs, 0).unwrap_or_default()
}

fn path_to_str(p: &Path) -> Result<&str> {
    p.to_str()
        .ok_or_else(|| Error::InvalidConfig(format!("path is not UTF-8: {}", p.display())))
}

fn opt_json<T: Serialize>(v: &Option<T>) -> Result<Option<String>> {
    v.as_ref().map(serde_json::to_string).transpose().map_err(Into::into)
}

fn image_from_row(r: &Row<'_>) -> rusqlite::Result<ImageRef> {
    Ok(ImageRef {
        image_id: r.get(0)?,
        root_id: r.get(1)?,
        run_period: r.get(2)?,
        run_number: r.get(3)?,
        plot_type: r.get(4)?,
        filename: r.get(5)?,
        captured_at: ts(r.get(6)?),
    })
}

fn label_from_row(r: &Row<'_>) -> rusqlite::Result<LabelRecord> {
    Ok(LabelRecord {
        label_id: r.get(0)?,
        image_id: r.get(1)?,
        class_name: r.get(2)?,
        labeler: r.get(3)?,
        labeled_at: ts(r.get(4)?),
    })
}

struct RawModel {
    model_id: i64,
    plot_type: String,
    backend: String,
    class_names: String,
    created_at: i64,
    train_config: Option<String>,
    split_config: Option<String>,
    metrics: Option<String>,
}

fn raw_model_from_row(r: &Row<'_>) -> rusqlite::Result<RawModel> {
    Ok(RawModel {
        model_id: r.get(0)?,
        plot_type: r.get(1)?,
        backend: r.get(2)?,
        class_names: r.get(3)?,
        created_at: r.get(4)?,
        train_config: r.get(5)?,
        split_config: r.get(6)?,
        metrics: r.get(7)?,
    })
}

impl RawModel {
    fn into_record(self) -> Result<ModelRecord> {
        fn parse<T: serde::de::DeserializeOwned>(s: Option<String>) -> Result<Option<T>> {
            s.map(|s| serde_json::from_str(&s)).transpose().map_err(Into::into)
        }
        Ok(ModelRecord {
            model_id: self.model_id,
            plot_type: self.plot_type,
            backend: self.backend,
            class_names: serde_json::from_str(&self.class_names)?,
            created_at: ts(self.created_at),
            train_config: parse(self.train_config)?,
            split_config: parse(self.split_config)?,
            metrics: parse(self.metrics)?,
        })
    }
}
