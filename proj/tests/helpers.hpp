#pragma once

#include <Eigen/Dense>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace testutil {

// Throwaway directory removed on scope exit.
class TempDir {
  public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("flowcast_" + tag + "_" + std::to_string(::getpid()) + "_" +
                 std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    std::string str() const { return path_.string(); }
    std::string file(const std::string& name) const { return (path_ / name).string(); }

  private:
    std::filesystem::path path_;
};

inline void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    out << content;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

// Central finite-difference gradient of f at x.
inline Eigen::VectorXd fd_gradient(const std::function<double(const Eigen::VectorXd&)>& f,
                                   const Eigen::VectorXd& x, double h = 1e-6) {
    Eigen::VectorXd g(x.size());
    Eigen::VectorXd xp = x;
    for (int i = 0; i < x.size(); ++i) {
        double step = h * std::max(1.0, std::abs(x[i]));
        xp[i] = x[i] + step;
        double fp = f(xp);
        xp[i] = x[i] - step;
        double fm = f(xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2 * step);
    }
    return g;
}

inline double rel_err(double got, double want) {
    return std::abs(got - want) / std::max(1.0, std::abs(want));
}

// Nelder-Mead maximizer, used as a derivative-free cross-check of the
// Newton-based fitters.  Returns the best objective value found.
inline double nelder_mead_max(const std::function<double(const Eigen::VectorXd&)>& f,
                              Eigen::VectorXd x0, int max_iter = 20000,
                              double spread = 0.25) {
    const int n = static_cast<int>(x0.size());
    auto neg = [&f](const Eigen::VectorXd& v) { return -f(v); };
    std::vector<Eigen::VectorXd> pts(n + 1, x0);
    for (int i = 0; i < n; ++i) pts[i + 1][i] += spread;
    std::vector<double> val(n + 1);
    for (int i = 0; i <= n; ++i) val[i] = neg(pts[i]);
    for (int iter = 0; iter < max_iter; ++iter) {
        std::vector<int> ord(n + 1);
        for (int i = 0; i <= n; ++i) ord[i] = i;
        std::sort(ord.begin(), ord.end(), [&val](int a, int b) { return val[a] < val[b]; });
        int best = ord[0], worst = ord[n], second = ord[n - 1];
        if (std::abs(val[worst] - val[best]) <
            1e-12 * (1.0 + std::abs(val[best])))
            break;
        Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
        for (int i = 0; i <= n; ++i)
            if (i != worst) centroid += pts[i];
        centroid /= n;
        Eigen::VectorXd refl = centroid + (centroid - pts[worst]);
        double fr = neg(refl);
        if (fr < val[best]) {
            Eigen::VectorXd exp_ = centroid + 2.0 * (centroid - pts[worst]);
            double fe = neg(exp_);
            if (fe < fr) { pts[worst] = exp_; val[worst] = fe; }
            else { pts[worst] = refl; val[worst] = fr; }
        } else if (fr < val[second]) {
            pts[worst] = refl;
            val[worst] = fr;
        } else {
            Eigen::VectorXd con = centroid + 0.5 * (pts[worst] - centroid);
            double fc = neg(con);
            if (fc < val[worst]) { pts[worst] = con; val[worst] = fc; }
            else {
                for (int i = 0; i <= n; ++i) {
                    if (i == best) continue;
                    pts[i] = pts[best] + 0.5 * (pts[i] - pts[best]);
                    val[i] = neg(pts[i]);
                }
            }
        }
    }
    double best = val[0];
    for (double v : val) best = std::min(best, v);
    return -best;
}

} // namespace testutil
