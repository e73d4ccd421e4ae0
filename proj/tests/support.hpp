#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>
#include <unsupported/Eigen/MatrixFunctions>

#include "cdrec/denoiser.hpp"
#include "cdrec/rng.hpp"

namespace testing {

using cdrec::Matrix;

// Absorbing base rate on k states: the last state absorbs, every other state
// leaves at rate 1. Column j holds the rates out of state j.
inline Eigen::MatrixXd absorbing_rate(int k) {
    Eigen::MatrixXd r = Eigen::MatrixXd::Zero(k, k);
    for (int j = 0; j + 1 < k; ++j) {
        r(j, j) = -1.0;
        r(k - 1, j) = 1.0;
    }
    return r;
}

// exp(a) through the eigendecomposition S exp(L) S^-1.
inline Eigen::MatrixXd expm_eigen(const Eigen::MatrixXd& a) {
    Eigen::EigenSolver<Eigen::MatrixXd> es(a);
    const Eigen::MatrixXcd s = es.eigenvectors();
    Eigen::VectorXcd l = es.eigenvalues();
    for (Eigen::Index i = 0; i < l.size(); ++i) {
        l(i) = std::exp(l(i));
    }
    const Eigen::MatrixXcd out = s * l.asDiagonal() * s.inverse();
    return out.real();
}

// exp(a) through Eigen's Pade scaling-and-squaring.
inline Eigen::MatrixXd expm_pade(const Eigen::MatrixXd& a) { return a.exp(); }

inline std::vector<double> ranks(const std::vector<double>& x) {
    std::vector<std::size_t> idx(x.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&x](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> r(x.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) {
            ++j;
        }
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    return r;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0.0;
    double saa = 0.0;
    double sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

// Spearman's rho with average ranks for ties.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    return pearson(ranks(a), ranks(b));
}

inline Matrix random_table(int rows, int cols, cdrec::Rng& rng, double scale = 1.0) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = scale * rng.normal();
    }
    return m;
}

inline cdrec::DenoiserConfig small_config(int n_users, int n_items, int dim, int layers, int seq_len,
                                          double horizon = 60.0) {
    cdrec::DenoiserConfig c;
    c.n_users = n_users;
    c.n_items = n_items;
    c.dim = dim;
    c.layers = layers;
    c.heads = 2;
    c.seq_len = seq_len;
    c.horizon = horizon;
    return c;
}

// Every tensor filled with N(0, scale^2), layer-norm gains around 1, so that
// gradient checks exercise all paths.
inline cdrec::DenoiserParams random_params(const cdrec::DenoiserConfig& c, std::uint64_t seed, double scale = 0.5) {
    cdrec::Rng rng(seed);
    auto p = cdrec::DenoiserParams::shaped(c);
    for (std::size_t i = 0; i < p.tensor_count(); ++i) {
        auto& t = p.tensor(i);
        const bool gain = p.name(i).find("gamma") != std::string::npos;
        for (Eigen::Index k = 0; k < t.size(); ++k) {
            t.data()[k] = (gain ? 1.0 : 0.0) + scale * rng.normal();
        }
    }
    return p;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("cdrec_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace testing
