#include "mdreg/engine.hpp"

#include "mdreg/field_ops.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <ostream>
#include <random>
#include <thread>

namespace mdreg {

void RegistrationConfig::validate() const
{
    if (levels < 1) {
        throw FieldError("config: levels must be >= 1");
    }
    if (!(lambda >= 0.0)) {
        throw FieldError("config: lambda must be >= 0");
    }
    if (steps < 1) {
        throw FieldError("config: integration steps must be >= 1");
    }
    if (!(lr > 0.0) || !(direct_lr > 0.0)) {
        throw FieldError("config: learning rates must be > 0");
    }
    if (batch != 1) {
        throw FieldError("config: only batch size 1 is supported");
    }
    if (iterations < 0 || direct_iterations < 0) {
        throw FieldError("config: iteration counts must be >= 0");
    }
    if (!(width > 0.0)) {
        throw FieldError("config: width multiplier must be > 0");
    }
    if (ksize % 2 == 0 || !(sigma > 0.0)) {
        throw FieldError("config: smoothing kernel must be odd with sigma > 0");
    }
}

LossOptions RegistrationConfig::loss_options() const
{
    return {lambda, steps, smoothing, sigma, ksize};
}

SubnetSpec RegistrationConfig::subnet_spec() const
{
    SubnetSpec s;
    s.width = width;
    s.leaky_slope = leaky_slope;
    return s;
}

Adam::Adam(std::vector<ad::Parameter*> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps)
{
    for (auto* p : params_) {
        m_.emplace_back(p->value.size(), 0.0);
        v_.emplace_back(p->value.size(), 0.0);
    }
}

void Adam::zero_grad()
{
    for (auto* p : params_) {
        p->zero_grad();
    }
}

void Adam::step()
{
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, t_);
    const double c2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto& value = params_[k]->value;
        const auto& grad = params_[k]->grad;
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double g = grad[i];
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
            value[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
        }
    }
}

namespace {


void check_finite(const LossBreakdown& loss, int iteration)
{
    const std::string bad = loss.first_nonfinite();
    if (!bad.empty()) {
        throw NumericalError("non-finite " + bad + " at iteration " + std::to_string(iteration));
    }
}

CascadeOptions cascade_options(const RegistrationConfig& cfg)
{
    CascadeOptions o;
    o.loss = cfg.loss_options();
    return o;
}

// One optimisation step; returns the loss before the update.
double optimisation_step(ModelParams& params, Adam& adam, std::span<const Volume> fixed_pyr,
                         std::span<const Volume> moving_pyr, const CascadeOptions& opts,
                         int iteration)
{
    adam.zero_grad();
    ad::Tape tape;
    CascadeGraph g = cascade_forward(tape, params, fixed_pyr, moving_pyr, opts);
    check_finite(g.loss.breakdown, iteration);
    tape.backward(g.loss.total);
    adam.step();
    return g.loss.breakdown.total;
}

} // namespace

TrainResult train(std::span<const Volume> images, const RegistrationConfig& cfg,
                  std::ostream* history_out)
{
    cfg.validate();
    if (images.empty()) {
        throw FieldError("train: need at least one image");
    }
    const Shape shape = images[0].shape();
    for (const auto& im : images) {
        require_same_shape(shape, im.shape(), "train: all images must share one grid");
    }
    std::vector<std::vector<Volume>> pyramids;
    for (const auto& im : images) {
        pyramids.push_back(build_pyramid(im, cfg.levels));
    }

    TrainResult result{init_params(cfg.subnet_spec(), Mode::network, shape, cfg.levels, cfg.seed),
                       {}};
    Adam adam(result.params.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_int_distribution<std::size_t> pick(0, images.size() * images.size() - 1);
    const CascadeOptions opts = cascade_options(cfg);
    result.history.reserve(cfg.iterations);
    for (int it = 0; it < cfg.iterations; ++it) {
        const std::size_t pair = pick(rng);
        const auto& fixed = pyramids[pair / images.size()];
        const auto& moving = pyramids[pair % images.size()];
        const double loss = optimisation_step(result.params, adam, fixed, moving, opts, it);
        result.history.push_back(loss);
        if (history_out) {
            *history_out << it << ',' << loss << '\n';
        }
    }
    return result;
}

RegistrationResult register_pair(const ModelParams* params, const Volume& fixed,
                                 const Volume& moving, const RegistrationConfig& cfg)
{
    cfg.validate();
    require_same_shape(fixed.shape(), moving.shape(), "register");
    const auto start = std::chrono::steady_clock::now();
    const auto fixed_pyr = build_pyramid(fixed, cfg.levels);
    const auto moving_pyr = build_pyramid(moving, cfg.levels);
    const CascadeOptions opts = cascade_options(cfg);

    RegistrationResult r;
    ModelParams model;
    if (cfg.mode == Mode::network) {
        if (!params || params->mode != Mode::network) {
            throw FieldError("register: network mode needs trained network parameters");
        }
        if (params->image_shape != fixed.shape()) {
            throw FieldError("register: image grid " + fixed.shape().str() +
                             " differs from the trained grid " + params->image_shape.str());
        }
        if (params->levels != cfg.levels) {
            throw FieldError("register: checkpoint has " + std::to_string(params->levels) +
                             " levels, config asks for " + std::to_string(cfg.levels));
        }
        model = *params;
    } else {
        model = init_params(cfg.subnet_spec(), Mode::direct, fixed.shape(), cfg.levels, cfg.seed);
        Adam adam(model.parameters(), cfg.direct_lr, cfg.beta1, cfg.beta2, cfg.eps);
        r.history.reserve(cfg.direct_iterations);
        for (int it = 0; it < cfg.direct_iterations; ++it) {
            r.history.push_back(optimisation_step(model, adam, fixed_pyr, moving_pyr, opts, it));
        }
    }

    ad::Tape tape(false);
    CascadeGraph g = cascade_forward(tape, model, fixed_pyr, moving_pyr, opts);
    check_finite(g.loss.breakdown, cfg.mode == Mode::direct ? cfg.direct_iterations : 0);
    r.adjoints_recorded = tape.adjoint_count();
    r.loss = g.loss.breakdown;
    for (const auto& v : g.increments) {
        r.increments.emplace_back(v.value());
    }
    for (const auto& lvl : g.loss.levels) {
        r.accumulated.emplace_back(lvl.accumulated.value());
    }
    r.final_svf = VectorField(g.final_svf.value());
    r.forward = integrate_svf(r.final_svf, cfg.steps);
    r.inverse = invert_svf(r.final_svf, cfg.steps);
    r.warped_moving = warp(moving, r.forward.disp);
    r.folds = count_nonpositive_jacobian(r.forward);
    r.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
}

std::vector<LabeledPair> template_pairs(std::span<const Volume> images,
                                        std::span<const LabelVolume> labels,
                                        std::size_t template_index)
{
    if (images.size() != labels.size()) {
        throw FieldError("template_pairs: one label volume per image required");
    }
    if (template_index >= images.size()) {
        throw FieldError("template_pairs: template index out of range");
    }
    std::vector<LabeledPair> out;
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (i == template_index) {
            continue;
        }
        out.push_back({images[template_index], labels[template_index], images[i], labels[i]});
    }
    return out;
}

std::vector<double> default_lambdas()
{
    return {0.1, 0.2, 0.35, 0.5, 0.75, 1.0};
}

SweepResult select_lambda(std::vector<SweepRow> rows)
{
    SweepResult r;
    r.rows = std::move(rows);
    if (r.rows.empty()) {
        throw FieldError("lambda sweep: no lambda values");
    }
    const SweepRow* best = nullptr;
    for (const auto& row : r.rows) {
        if (row.total_folds != 0) {
            continue;
        }
        if (!best || row.mean_dice > best->mean_dice ||
            (row.mean_dice == best->mean_dice && row.lambda < best->lambda)) {
            best = &row;
        }
    }
    if (!best) {
        r.flagged = true;
        for (const auto& row : r.rows) {
            if (!best || row.total_folds < best->total_folds ||
                (row.total_folds == best->total_folds &&
                 (row.mean_dice > best->mean_dice ||
                  (row.mean_dice == best->mean_dice && row.lambda < best->lambda)))) {
                best = &row;
            }
        }
    }
    r.selected_lambda = best->lambda;
    return r;
}

SweepResult lambda_sweep(std::span<const Volume> train_images,
                         std::span<const LabeledPair> validation,
                         std::span<const double> lambdas, const RegistrationConfig& cfg)
{
    if (validation.empty()) {
        throw FieldError("lambda sweep: empty validation set");
    }
    if (lambdas.empty()) {
        throw FieldError("lambda sweep: no lambda values");
    }
    std::vector<SweepRow> rows(lambdas.size());
    parallel_for(lambdas.size(), [&](std::size_t k) {
        RegistrationConfig c = cfg;
        c.lambda = lambdas[k];
        std::optional<ModelParams> model;
        if (c.mode == Mode::network) {
            model = train(train_images, c).params;
        }
        double dice_sum = 0.0;
        std::size_t folds = 0;
        for (const auto& pair : validation) {
            const RegistrationResult res =
                register_pair(model ? &*model : nullptr, pair.fixed, pair.moving, c);
            const LabelVolume warped = warp_labels(pair.moving_labels, res.forward);
            dice_sum += dice(warped, pair.fixed_labels).mean;
            folds += res.folds;
        }
        const double n = static_cast<double>(validation.size());
        rows[k] = {lambdas[k], dice_sum / n, static_cast<double>(folds) / n, folds};
    });
    return select_lambda(std::move(rows));
}

unsigned max_threads()
{
    if (const char* env = std::getenv("MDRN_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) {
            return static_cast<unsigned>(n);
        }
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn)
{
    const std::size_t workers = std::min<std::size_t>(max_threads(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) {
                        error = std::current_exception();
                    }
                }
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
    if (error) {
        std::rethrow_exception(error);
    }
}

} // namespace mdreg
