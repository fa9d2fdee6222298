#pragma once

#include "mdreg/evalsynth.hpp"
#include "mdreg/objective.hpp"
#include "mdreg/regnet.hpp"
#include "mdreg/transform.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <vector>

namespace mdreg {

struct RegistrationConfig {
    int levels = 3;
    double lambda = 0.35;
    int steps = 7;
    double sigma = 1.732;
    int ksize = 3;
    bool smoothing = true;

    // Network training.
    double lr = 1e-4;
    int batch = 1;
    int iterations = 150000;
    double width = 1.0;
    double leaky_slope = 0.2;

    // Instance-wise optimisation of the velocities themselves.
    double direct_lr = 0.1;
    int direct_iterations = 300;

    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    std::uint64_t seed = 0;
    Mode mode = Mode::network;

    void validate() const;
    LossOptions loss_options() const;
    SubnetSpec subnet_spec() const;
};

/// Adam with bias correction; state is per parameter, created on first step.
class Adam {
public:
    Adam(std::vector<ad::Parameter*> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8);

    void step();
    void zero_grad();
    int steps_taken() const { return t_; }

private:
    std::vector<ad::Parameter*> params_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    double lr_;
    double beta1_;
    double beta2_;
    double eps_;
    int t_ = 0;
};

struct TrainResult {
    ModelParams params;
    std::vector<double> history; // total loss per iteration
};

/// Trains the cascade on ordered pairs drawn uniformly from all n^2 (fixed, moving)
/// combinations, self-pairs included. `history_out` receives "iteration,loss" lines.
TrainResult train(std::span<const Volume> images, const RegistrationConfig& cfg,
                  std::ostream* history_out = nullptr);

struct RegistrationResult {
    VectorField final_svf;
    DeformationField forward;
    DeformationField inverse;
    std::vector<VectorField> increments;
    std::vector<VectorField> accumulated;
    Volume warped_moving;
    LossBreakdown loss;
    std::vector<double> history; // direct mode only
    double seconds = 0.0;
    std::size_t folds = 0;
    std::size_t adjoints_recorded = 0;
};

/// Network mode: one forward pass with `params`. Direct mode: `params` is ignored
/// and zero-initialised velocities are optimised with Adam on the same objective.
RegistrationResult register_pair(const ModelParams* params, const Volume& fixed,
                                 const Volume& moving, const RegistrationConfig& cfg);

struct LabeledPair {
    Volume fixed;
    LabelVolume fixed_labels;
    Volume moving;
    LabelVolume moving_labels;
};

/// Pairs every other image of a labelled set with the designated template as fixed image.
std::vector<LabeledPair> template_pairs(std::span<const Volume> images,
                                        std::span<const LabelVolume> labels,
                                        std::size_t template_index);

struct SweepRow {
    double lambda = 0.0;
    double mean_dice = 0.0;
    double mean_folds = 0.0;
    std::size_t total_folds = 0;
};

struct SweepResult {
    std::vector<SweepRow> rows;
    double selected_lambda = 0.0;
    bool flagged = false; // no lambda produced fold-free fields
};

std::vector<double> default_lambdas();

/// Picks the lambda with the highest mean Dice among fold-free rows (smallest lambda
/// on ties); without a fold-free row, the fewest folds wins and the result is flagged.
SweepResult select_lambda(std::vector<SweepRow> rows);

/// One model per lambda (trained on `train_images` in network mode; direct mode
/// registers each validation pair instead), evaluated on `validation`.
SweepResult lambda_sweep(std::span<const Volume> train_images,
                         std::span<const LabeledPair> validation,
                         std::span<const double> lambdas, const RegistrationConfig& cfg);

/// Runs fn(i) for i in [0, n) on up to `max_threads()` threads.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);
/// Thread cap from MDRN_THREADS, else hardware concurrency.
unsigned max_threads();

} // namespace mdreg
