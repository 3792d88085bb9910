//! Desk-scale harness: configuration, synthetic data, image I/O, toy
//! training, mAP evaluation, scan benchmarks and the gradient-check suite.

mod bench;
mod config;
mod data;
mod eval;
mod gradsuite;
mod image;
mod train;

pub use bench::{
    bench_scan, bench_scan_with, random_problem, BenchConfig, BenchReport, BenchRow, BENCH_VERSION,
};
pub use config::{
    config_to_string, load_config, parse_config, save_config, RunConfig, CONFIG_VERSION,
};
pub use data::{
    annotations_to_string, gen_synthetic, load_dataset, parse_annotations, read_annotations,
    synth_dataset, synth_image, write_annotations, AnnotatedImage, Object, Sample, ANNOTATION_FILE,
    ANNOTATION_VERSION, SHAPES,
};
pub use eval::{
    class_ap, coco_iou_thresholds, detections_to_string, eval_map, interpolated_ap, match_greedy,
    mean_ap, parse_detections, read_detections, write_detections, GroundTruth, ImageDetections,
    MapReport, Prediction, DETECTIONS_VERSION, RECALL_POINTS,
};
pub use gradsuite::{grad_suite, run_case, run_grad_suite, CaseOutcome, GradCase, SUITE_TOLERANCE};
pub use image::{decode_ppm, encode_ppm, letterbox, load_ppm, save_ppm, Letterbox, PAD_VALUE};
pub use train::{
    assign_targets, eval_loss, predict_samples, prepare_samples, toy_loss, train_toy, Assignment,
    EpochRecord, LossVars, TrainLog, METRICS_VERSION,
};
