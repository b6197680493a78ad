#pragma once

#include "anrot/autograd.hpp"
#include "anrot/checkpoint.hpp"
#include "anrot/config.hpp"
#include "anrot/episodic.hpp"
#include "anrot/errors.hpp"
#include "anrot/eval_metrics.hpp"
#include "anrot/gauss_metrics.hpp"
#include "anrot/network.hpp"
#include "anrot/parallel.hpp"
#include "anrot/rng.hpp"
#include "anrot/robustness.hpp"
#include "anrot/tensor.hpp"
#include "anrot/variational.hpp"
