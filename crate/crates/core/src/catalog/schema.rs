pub(crate) const SCHEMA: &str = r#"
-- arm A: images, labels and everything derived for training and testing
CREATE TABLE IF NOT EXISTS roots (
    root_id     TEXT PRIMARY KEY,
    base_path   TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS class_sets (
    plot_type     TEXT PRIMARY KEY,
    classes       TEXT NOT NULL,
    alarm_classes TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS images (
    image_id    INTEGER PRIMARY KEY,
    root_id     TEXT NOT NULL REFERENCES roots(root_id),
    run_period  TEXT NOT NULL,
    run_number  INTEGER NOT NULL CHECK (run_number >= 1),
    plot_type   TEXT NOT NULL,
    filename    TEXT NOT NULL CHECK (filename <> ''),
    captured_at INTEGER NOT NULL,
    UNIQUE (root_id, run_period, run_number, plot_type, filename)
);
CREATE INDEX IF NOT EXISTS images_by_plot_time ON images(plot_type, captured_at, image_id);
CREATE TABLE IF NOT EXISTS labels (
    label_id   INTEGER PRIMARY KEY,
    image_id   INTEGER NOT NULL REFERENCES images(image_id),
    class_name TEXT NOT NULL,
    labeler    TEXT NOT NULL,
    labeled_at INTEGER NOT NULL
);
CREATE INDEX IF NOT EXISTS labels_by_image ON labels(image_id, labeled_at, label_id);
CREATE TRIGGER IF NOT EXISTS labels_no_update BEFORE UPDATE ON labels
BEGIN SELECT RAISE(ABORT, 'labels are append-only'); END;
CREATE TRIGGER IF NOT EXISTS labels_no_delete BEFORE DELETE ON labels
BEGIN SELECT RAISE(ABORT, 'labels are append-only'); END;
CREATE TABLE IF NOT EXISTS users (
    user_id  TEXT PRIMARY KEY,
    is_admin INTEGER NOT NULL DEFAULT 0
);
CREATE TABLE IF NOT EXISTS api_tokens (
    token   TEXT PRIMARY KEY,
    user_id TEXT NOT NULL REFERENCES users(user_id)
);
CREATE TABLE IF NOT EXISTS permissions (
    user_id   TEXT NOT NULL REFERENCES users(user_id),
    plot_type TEXT NOT NULL,
    PRIMARY KEY (user_id, plot_type)
);
CREATE TABLE IF NOT EXISTS models (
    model_id     INTEGER PRIMARY KEY,
    plot_type    TEXT NOT NULL,
    backend      TEXT NOT NULL,
    class_names  TEXT NOT NULL,
    created_at   INTEGER NOT NULL,
    blob         BLOB NOT NULL,
    train_config TEXT,
    split_config TEXT,
    metrics      TEXT
);
CREATE TABLE IF NOT EXISTS model_split (
    model_id INTEGER NOT NULL REFERENCES models(model_id),
    image_id INTEGER NOT NULL REFERENCES images(image_id),
    part     TEXT NOT NULL,
    PRIMARY KEY (model_id, image_id, part)
);
CREATE TABLE IF NOT EXISTS inferences (
    model_id        INTEGER NOT NULL REFERENCES models(model_id),
    image_id        INTEGER NOT NULL REFERENCES images(image_id),
    confidences     TEXT NOT NULL,
    predicted_class TEXT NOT NULL,
    confidence      REAL NOT NULL,
    inferred_at     INTEGER NOT NULL,
    PRIMARY KEY (model_id, image_id)
);
CREATE TABLE IF NOT EXISTS threshold_tables (
    table_id      INTEGER PRIMARY KEY,
    model_id      INTEGER NOT NULL REFERENCES models(model_id),
    target_fpr    REAL NOT NULL,
    alarm_classes TEXT NOT NULL,
    entries       TEXT NOT NULL,
    created_at    INTEGER NOT NULL
);

-- arm B: live operation
CREATE TABLE IF NOT EXISTS operational_records (
    record_id       INTEGER PRIMARY KEY,
    image_id        INTEGER NOT NULL REFERENCES images(image_id),
    model_id        INTEGER REFERENCES models(model_id),
    confidences     TEXT NOT NULL,
    predicted_class TEXT,
    confidence      REAL,
    decision        TEXT NOT NULL,
    sampled         INTEGER NOT NULL,
    decided_at      INTEGER NOT NULL,
    note            TEXT
);
CREATE INDEX IF NOT EXISTS operational_by_time ON operational_records(decided_at, record_id);
CREATE INDEX IF NOT EXISTS operational_by_image ON operational_records(image_id);
"#;
