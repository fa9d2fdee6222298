#include "mdreg/cli.hpp"

#include "mdreg/engine.hpp"
#include "mdreg/field_ops.hpp"
#include "mdreg/io.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <algorithm>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>

namespace mdreg {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;
using io::format_number;

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr const char* kMetricsSchema = "mdreg.metrics";
inline constexpr int kMetricsSchemaVersion = 1;

RegistrationConfig load_config(const std::string& path)
{
    RegistrationConfig cfg;
    if (path.empty()) {
        return cfg;
    }
    try {
        return io::parse_config(io::read_file(path));
    } catch (const std::exception& e) {
        throw UsageError("config " + path + ": " + e.what());
    }
}

std::vector<int> parse_dims(const std::string& text)
{
    std::vector<int> dims;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            const int d = std::stoi(item, &used);
            if (used != item.size() || d < 1) {
                throw std::invalid_argument(item);
            }
            dims.push_back(d);
        } catch (const std::exception&) {
            throw UsageError("--dims: '" + text + "' is not a list of positive integers");
        }
    }
    if (dims.empty() || dims.size() > 3) {
        throw UsageError("--dims: expected 1 to 3 sizes, got '" + text + "'");
    }
    return dims;
}

void ensure_dir(const fs::path& dir)
{
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw io::IoError("cannot create directory " + dir.string() + ": " + ec.message());
    }
}

void write_text(const fs::path& path, const std::string& text)
{
    io::write_file_atomic(path, text);
}

std::vector<Volume> load_scalar_dir(const fs::path& dir)
{
    if (!fs::is_directory(dir)) {
        throw io::IoError("data directory " + dir.string() + " does not exist");
    }
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.path().extension() == ".json") {
            files.push_back(e.path());
        }
    }
    std::sort(files.begin(), files.end());
    std::vector<Volume> images;
    for (const auto& f : files) {
        if (io::read_header(f).kind == io::Kind::scalar) {
            images.push_back(io::read_volume(f));
        }
    }
    if (images.empty()) {
        throw io::IoError("no scalar volumes in " + dir.string());
    }
    return images;
}

// ---------------------------------------------------------------- subcommands

struct SynthArgs {
    std::uint64_t seed = 0;
    std::string dims = "32,32,32";
    double mag = 4.0;
    int blobs = 40;
    double noise = 0.0;
    std::string out;
};

int cmd_synth(const SynthArgs& a, std::ostream& out)
{
    SynthOptions opts;
    opts.noise = a.noise;
    const auto p = synth_pair(a.seed, Shape(parse_dims(a.dims)), a.mag, a.blobs, opts);
    const fs::path dir(a.out);
    ensure_dir(dir);
    io::Provenance prov;
    prov.seed = a.seed;
    io::write_volume(dir / "fixed.json", p.fixed, prov);
    io::write_volume(dir / "moving.json", p.moving, prov);
    io::write_labels(dir / "fixed_labels.json", p.fixed_labels, prov);
    io::write_labels(dir / "moving_labels.json", p.moving_labels, prov);
    io::write_vector(dir / "svf.json", p.svf, prov);
    io::write_vector(dir / "forward.json", p.forward.disp, prov);
    out << "wrote " << dir.string() << "\n";
    return kExitOk;
}

struct TrainArgs {
    std::string data_dir;
    std::string config;
    std::string checkpoint;
    std::string history;
    std::optional<std::uint64_t> seed;
    std::optional<int> iterations;
};

int cmd_train(const TrainArgs& a, std::ostream& out)
{
    RegistrationConfig cfg = load_config(a.config);
    if (a.seed) {
        cfg.seed = *a.seed;
    }
    if (a.iterations) {
        cfg.iterations = *a.iterations;
    }
    cfg.mode = Mode::network;
    const auto images = load_scalar_dir(a.data_dir);
    std::ostringstream hist;
    hist << "iteration,loss\n";
    const auto r = train(images, cfg, &hist);
    io::write_checkpoint(a.checkpoint, r.params, cfg);
    if (!a.history.empty()) {
        write_text(a.history, hist.str());
    }
    out << "trained " << r.history.size() << " iterations on " << images.size()
        << " images, final loss " << format_number(r.history.empty() ? 0.0 : r.history.back())
        << "\n";
    return kExitOk;
}

struct RegisterArgs {
    std::string checkpoint;
    bool direct = false;
    std::string config;
    std::string fixed;
    std::string moving;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
    std::optional<double> lambda;
    std::optional<int> iterations;
};

int cmd_register(const RegisterArgs& a, std::ostream& out)
{
    if (a.direct == !a.checkpoint.empty()) {
        throw UsageError("register: give exactly one of --checkpoint or --direct");
    }
    RegistrationConfig cfg;
    std::optional<ModelParams> params;
    if (a.direct) {
        cfg = load_config(a.config);
        cfg.mode = Mode::direct;
    } else {
        RegistrationConfig stored;
        params = io::read_checkpoint(a.checkpoint, &stored);
        cfg = a.config.empty() ? stored : load_config(a.config);
        cfg.mode = params->mode;
        cfg.levels = params->levels;
    }
    if (a.seed) {
        cfg.seed = *a.seed;
    }
    if (a.lambda) {
        cfg.lambda = *a.lambda;
    }
    if (a.iterations) {
        cfg.direct_iterations = *a.iterations;
    }
    try {
        cfg.validate();
    } catch (const FieldError& e) {
        throw UsageError(e.what());
    }

    // Files hold f32, so registering what was read keeps warp reproducible.
    const Volume fixed = io::read_volume(a.fixed);
    const Volume moving = io::read_volume(a.moving);
    auto r = register_pair(params ? &*params : nullptr, fixed, moving, cfg);

    const VectorField forward(io::quantize_f32(r.forward.disp));
    const Volume warped = warp(moving, forward);
    const fs::path dir(a.out_dir);
    ensure_dir(dir);
    io::Provenance prov;
    prov.seed = cfg.seed;
    prov.config_hash = io::config_hash(cfg);
    io::write_vector(dir / "svf.json", r.final_svf, prov);
    io::write_vector(dir / "forward.json", forward, prov);
    io::write_vector(dir / "inverse.json", r.inverse.disp, prov);
    io::write_volume(dir / "warped.json", warped, prov);

    json m;
    m["schema"] = kMetricsSchema;
    m["schema_version"] = kMetricsSchemaVersion;
    m["mode"] = to_string(cfg.mode);
    m["levels"] = cfg.levels;
    m["lambda"] = cfg.lambda;
    m["seed"] = cfg.seed;
    m["config_hash"] = prov.config_hash;
    m["dims"] = fixed.shape().dims();
    m["ncc_before"] = ncc(fixed, moving);
    m["ncc_after"] = ncc(fixed, warped);
    m["folds"] = count_nonpositive_jacobian(DeformationField{forward, Provenance::external});
    m["seconds"] = r.seconds;
    m["loss"] = {{"total", r.loss.total},
                 {"forward", r.loss.forward},
                 {"backward", r.loss.backward},
                 {"regularization", r.loss.reg}};
    if (!r.history.empty()) {
        m["iterations"] = r.history.size();
    }
    write_text(dir / "metrics.json", m.dump(2) + "\n");
    out << "ncc_before " << format_number(m["ncc_before"].get<double>()) << "\n"
        << "ncc_after " << format_number(m["ncc_after"].get<double>()) << "\n"
        << "folds " << m["folds"].get<std::size_t>() << "\n";
    return kExitOk;
}

struct WarpArgs {
    std::string image;
    std::string labels;
    std::string field;
    std::string out;
};

int cmd_warp(const WarpArgs& a, std::ostream& out)
{
    if (a.image.empty() == a.labels.empty()) {
        throw UsageError("warp: give exactly one of --image or --labels");
    }
    const VectorField disp = io::read_vector(a.field);
    if (!a.image.empty()) {
        const Volume v = io::read_volume(a.image);
        io::write_volume(a.out, warp(v, disp));
    } else {
        const LabelVolume lv = io::read_labels(a.labels);
        io::write_labels(a.out, warp_labels(lv, DeformationField{disp, Provenance::external}));
    }
    out << "wrote " << a.out << "\n";
    return kExitOk;
}

int cmd_jacobian(const std::string& field, const std::string& path, std::ostream& out)
{
    const DeformationField d{io::read_vector(field), Provenance::external};
    const Volume det = jacobian_determinant(d);
    const auto folds = static_cast<std::size_t>(
        std::count_if(det.raw().begin(), det.raw().end(), [](double j) { return !(j > 0.0); }));
    if (!path.empty()) {
        io::write_volume(path, det);
    }
    out << "folds " << folds << "\n";
    return kExitOk;
}

int cmd_dice(const std::string& a, const std::string& b, const std::string& sep,
             std::ostream& out)
{
    const auto r = dice(io::read_labels(a), io::read_labels(b));
    out << "label" << sep << "dice\n";
    for (const auto& [label, value] : r.per_label) {
        out << label << sep << format_number(value) << "\n";
    }
    out << "mean" << sep << format_number(r.mean) << "\n";
    return kExitOk;
}

struct SweepArgs {
    std::vector<double> lambdas = default_lambdas();
    std::string out_table;
    std::string config;
    std::string dims = "24,24,24";
    int pairs = 8;
    double mag = 3.0;
    int blobs = 30;
    std::uint64_t seed = 0;
    std::optional<int> iterations;
    bool network = false;
};

int cmd_sweep(const SweepArgs& a, std::ostream& out)
{
    if (a.lambdas.empty()) {
        throw UsageError("sweep: --lambdas is empty");
    }
    if (a.pairs < 1) {
        throw UsageError("sweep: --pairs must be positive");
    }
    RegistrationConfig cfg = load_config(a.config);
    cfg.mode = a.network ? Mode::network : Mode::direct;
    cfg.seed = a.seed;
    if (a.iterations) {
        (a.network ? cfg.iterations : cfg.direct_iterations) = *a.iterations;
    }
    const Shape shape(parse_dims(a.dims));
    std::vector<LabeledPair> suite(a.pairs);
    std::vector<Volume> images;
    for (int k = 0; k < a.pairs; ++k) {
        auto p = synth_pair(a.seed + static_cast<std::uint64_t>(k), shape, a.mag, a.blobs);
        images.push_back(p.moving);
        images.push_back(p.fixed);
        suite[k] = {p.fixed, p.fixed_labels, p.moving, p.moving_labels};
    }
    const auto r = lambda_sweep(images, suite, a.lambdas, cfg);
    std::ostringstream table;
    table << "lambda,mean_dice,mean_folds,total_folds,selected\n";
    for (const auto& row : r.rows) {
        table << format_number(row.lambda) << "," << format_number(row.mean_dice) << ","
              << format_number(row.mean_folds) << "," << row.total_folds << ","
              << (row.lambda == r.selected_lambda ? 1 : 0) << "\n";
    }
    if (!a.out_table.empty()) {
        write_text(a.out_table, table.str());
    }
    out << table.str();
    if (r.flagged) {
        out << "warning: no lambda produced fold-free fields\n";
    }
    return kExitOk;
}

struct PlotArgs {
    std::string field;
    std::string jacobian;
    int axis = 0;
    int index = -1;
    int spacing = 4;
    int zoom = 4;
    std::string out;
};

int cmd_plot(const PlotArgs& a, std::ostream& out)
{
    if (a.field.empty() == a.jacobian.empty()) {
        throw UsageError("plot: give exactly one of --field or --jacobian");
    }
    if (a.spacing < 1 || a.zoom < 1) {
        throw UsageError("plot: --spacing and --zoom must be positive");
    }
    auto middle = [&](const Shape& s) {
        return a.index >= 0 || s.rank() < 3 ? std::max(a.index, 0) : s.dim(a.axis) / 2;
    };
    if (!a.field.empty()) {
        const DeformationField d{io::read_vector(a.field), Provenance::external};
        io::write_grid_plot(a.out, d, a.axis, middle(d.shape()), a.spacing, a.zoom);
    } else {
        const Volume det = io::read_volume(a.jacobian);
        io::write_jacobian_plot(a.out, det, a.axis, middle(det.shape()), a.zoom);
    }
    out << "wrote " << a.out << "\n";
    return kExitOk;
}

} // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Multi-resolution diffeomorphic image registration"};
    app.name("mdreg");
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all");

    std::optional<std::string> threads;

    SynthArgs synth;
    auto* s = app.add_subcommand("synth", "Write a synthetic pair with ground truth");
    s->add_option("--seed", synth.seed);
    s->add_option("--dims", synth.dims, "Comma-separated sizes");
    s->add_option("--mag", synth.mag, "Peak displacement in voxels")->check(CLI::NonNegativeNumber);
    s->add_option("--blobs", synth.blobs)->check(CLI::PositiveNumber);
    s->add_option("--noise", synth.noise)->check(CLI::NonNegativeNumber);
    s->add_option("--out", synth.out, "Output directory")->required();

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "Train the network on every scalar volume in a directory");
    t->add_option("--data-dir", tr.data_dir)->required();
    t->add_option("--config", tr.config);
    t->add_option("--out-checkpoint", tr.checkpoint)->required();
    t->add_option("--history", tr.history, "Loss history file (iteration,loss)");
    t->add_option("--seed", tr.seed);
    t->add_option("--iterations", tr.iterations)->check(CLI::PositiveNumber);

    RegisterArgs reg;
    auto* r = app.add_subcommand("register", "Register a moving image to a fixed image");
    auto* ck = r->add_option("--checkpoint", reg.checkpoint);
    r->add_flag("--direct", reg.direct, "Optimise the velocities directly")->excludes(ck);
    r->add_option("--config", reg.config);
    r->add_option("--fixed", reg.fixed)->required();
    r->add_option("--moving", reg.moving)->required();
    r->add_option("--out-dir", reg.out_dir)->required();
    r->add_option("--seed", reg.seed);
    r->add_option("--lambda", reg.lambda)->check(CLI::NonNegativeNumber);
    r->add_option("--iterations", reg.iterations)->check(CLI::PositiveNumber);

    WarpArgs wa;
    auto* w = app.add_subcommand("warp", "Warp an image or label volume with a displacement field");
    auto* wi = w->add_option("--image", wa.image);
    w->add_option("--labels", wa.labels)->excludes(wi);
    w->add_option("--field", wa.field)->required();
    w->add_option("--out", wa.out)->required();

    std::string jac_field, jac_out;
    auto* j = app.add_subcommand("jacobian", "Jacobian determinant and fold count of a field");
    j->add_option("--field", jac_field)->required();
    j->add_option("--out", jac_out);

    std::string dice_a, dice_b, dice_sep = ",";
    auto* d = app.add_subcommand("dice", "Per-label Dice between two label volumes");
    d->add_option("--a", dice_a)->required();
    d->add_option("--b", dice_b)->required();
    d->add_option("--delimiter", dice_sep);

    SweepArgs sw;
    auto* sp = app.add_subcommand("sweep", "Lambda sweep on the bundled synthetic suite");
    sp->add_option("--lambdas", sw.lambdas)->delimiter(',');
    sp->add_option("--out-table", sw.out_table);
    sp->add_option("--config", sw.config);
    sp->add_option("--dims", sw.dims);
    sp->add_option("--pairs", sw.pairs);
    sp->add_option("--mag", sw.mag)->check(CLI::NonNegativeNumber);
    sp->add_option("--blobs", sw.blobs)->check(CLI::PositiveNumber);
    sp->add_option("--seed", sw.seed);
    sp->add_option("--iterations", sw.iterations)->check(CLI::PositiveNumber);
    sp->add_flag("--network", sw.network, "Train one network per lambda instead");

    PlotArgs pl;
    auto* p = app.add_subcommand("plot", "Slice plots as portable pixmaps");
    auto* pf = p->add_option("--field", pl.field);
    p->add_option("--jacobian", pl.jacobian)->excludes(pf);
    p->add_option("--slice-axis", pl.axis)->check(CLI::Range(0, 2));
    p->add_option("--slice-index", pl.index);
    p->add_option("--spacing", pl.spacing);
    p->add_option("--zoom", pl.zoom);
    p->add_option("--out", pl.out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        std::ostringstream help;
        app.exit(e, help, help);
        out << help.str();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "mdreg: " << e.what() << "\n";
        return kExitUsage;
    }

    try {
        if (s->parsed()) return cmd_synth(synth, out);
        if (t->parsed()) return cmd_train(tr, out);
        if (r->parsed()) return cmd_register(reg, out);
        if (w->parsed()) return cmd_warp(wa, out);
        if (j->parsed()) return cmd_jacobian(jac_field, jac_out, out);
        if (d->parsed()) return cmd_dice(dice_a, dice_b, dice_sep, out);
        if (sp->parsed()) return cmd_sweep(sw, out);
        if (p->parsed()) return cmd_plot(pl, out);
    } catch (const UsageError& e) {
        err << "mdreg: " << e.what() << "\n";
        return kExitUsage;
    } catch (const NumericalError& e) {
        err << "mdreg: numerical abort: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const std::exception& e) {
        err << "mdreg: " << e.what() << "\n";
        return kExitData;
    }
    err << "mdreg: no subcommand\n";
    return kExitUsage;
}

} // namespace mdreg
