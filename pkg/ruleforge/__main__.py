from ruleforge.main import main

main()
