from nofis.baselines.adaptive_is import AisConfig, adaptive_is_estimate
from nofis.baselines.monte_carlo import McConfig, mc_estimate
from nofis.baselines.scaled_sigma import SssConfig, sss_estimate
from nofis.baselines.subset_simulation import SusConfig, sus_estimate

ESTIMATORS = {
    'mc': (McConfig, mc_estimate),
    'sus': (SusConfig, sus_estimate),
    'sss': (SssConfig, sss_estimate),
    'ais': (AisConfig, adaptive_is_estimate),
}
