#pragma once

#include "fedalign/tensor.hpp"
#include "fedalign/ops.hpp"
#include "fedalign/rng.hpp"
#include "fedalign/params.hpp"
#include "fedalign/optim.hpp"
#include "fedalign/method.hpp"
#include "fedalign/blocknet.hpp"
#include "fedalign/cost.hpp"
#include "fedalign/data.hpp"
#include "fedalign/losses.hpp"
#include "fedalign/client.hpp"
#include "fedalign/second_order.hpp"
#include "fedalign/config.hpp"
#include "fedalign/checkpoint.hpp"
#include "fedalign/metrics.hpp"
#include "fedalign/server.hpp"
#include "fedalign/diagnostics.hpp"
