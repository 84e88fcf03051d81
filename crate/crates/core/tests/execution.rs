use igrad::data::{synthetic_shapes, ShapeKind};
use igrad::metrics::{evaluate_method, ClassPolicy, CurveConfig};
use igrad::nn::{build_model, ArchitectureSpec, LAST_CONV};
use igrad::saliency::CamMethod;
use igrad::train::{evaluate_accuracy, gradient_alignment};
use igrad::Execution;

#[test]
fn sequential_and_parallel_paths_agree_bitwise() {
    let data = synthetic_shapes(12, &ShapeKind::ALL, 8, 9).unwrap();
    let model = build_model(&ArchitectureSpec::tinycnn([3, 8, 8], 4), 2).unwrap();
    let curves = CurveConfig { pixels_per_step: Some(8), ..CurveConfig::default() };
    let run = |exec| {
        let r = evaluate_method(&model, &data, CamMethod::GradCamPlusPlus, LAST_CONV, ClassPolicy::Predicted, Some(&curves), exec).unwrap();
        let acc = evaluate_accuracy(&model, &data, exec).unwrap();
        let align = gradient_alignment(&model, &data, exec).unwrap();
        (r.scores.ad.to_bits(), r.scores.ag.to_bits(), r.insertion.map(f64::to_bits), r.deletion.map(f64::to_bits), acc.to_bits(), align.to_bits())
    };
    assert_eq!(run(Execution::Sequential), run(Execution::Parallel));
}
